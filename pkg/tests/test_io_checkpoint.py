import json
import struct

import numpy as np
import pytest

from factories import fixed_tube, random_boxes
from trackloc import io
from trackloc.recurrent import Architecture, ModelParams, forward
from trackloc.recurrent.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from trackloc.tracks import Detection, GroundTruthInstance, InputError, PersonTrack


class TestTFV:
    def test_layout(self, tmp_path):
        path = tmp_path / "x.tfv"
        io.write_tfv(path, np.arange(6, dtype=float).reshape(3, 2))
        blob = path.read_bytes()
        assert blob[:4] == b"TFV1"
        assert struct.unpack("<II", blob[4:12]) == (3, 2)
        assert len(blob) == 12 + 6 * 4

    def test_round_trip_float32_values(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(7, 5)).astype(np.float32).astype(np.float64)
        io.write_tfv(tmp_path / "x.tfv", x)
        np.testing.assert_array_equal(io.read_tfv(tmp_path / "x.tfv"), x)

    def test_empty_matrix(self, tmp_path):
        io.write_tfv(tmp_path / "e.tfv", np.zeros((0, 3)))
        assert io.read_tfv(tmp_path / "e.tfv").shape == (0, 3)

    @pytest.mark.parametrize("blob", [b"XXXX" + bytes(8), b"TFV1\x01", b"TFV1" + struct.pack("<II", 2, 2) + bytes(4)])
    def test_corrupt(self, tmp_path, blob):
        (tmp_path / "c.tfv").write_bytes(blob)
        with pytest.raises(io.DataError):
            io.read_tfv(tmp_path / "c.tfv")

    def test_rejects_vectors(self, tmp_path):
        with pytest.raises(InputError):
            io.write_tfv(tmp_path / "v.tfv", np.zeros(3))


def test_tracks_round_trip_with_features(tmp_path):
    rng = np.random.default_rng(1)
    tracks = []
    for k in range(3):
        n = int(rng.integers(1, 12))
        feats = {"appearance": rng.normal(size=(n, 4)).astype(np.float32).astype(float),
                 "flow": rng.normal(size=(n, 2)).astype(np.float32).astype(float)}
        tracks.append(PersonTrack(f"v{k % 2}", k, random_boxes(rng, n), track_id=f"t{k}", features=feats))
    io.write_tracks(tmp_path / "tracks.jsonl", tracks)
    back = io.read_tracks(tmp_path / "tracks.jsonl")
    for a, b in zip(tracks, back):
        assert (a.video_id, a.track_id, a.start_frame) == (b.video_id, b.track_id, b.start_frame)
        np.testing.assert_array_equal(a.boxes, b.boxes)
        for s in a.features:
            np.testing.assert_array_equal(a.features[s], b.features[s])
    lazy = io.read_tracks(tmp_path / "tracks.jsonl", load_features=False)
    assert not lazy[0].features


def test_ground_truth_and_detections_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    gts = [GroundTruthInstance("v", 3, random_boxes(rng, 5), class_id=2)]
    dets = [Detection("v", 4, random_boxes(rng, 6), class_id=1, score=0.123456789012345, track_id="t0")]
    io.write_ground_truth(tmp_path / "gt.jsonl", gts)
    io.write_detections(tmp_path / "d.jsonl", dets)
    g, d = io.read_ground_truth(tmp_path / "gt.jsonl")[0], io.read_detections(tmp_path / "d.jsonl")[0]
    assert g.class_id == 2 and g.interval == (3, 7)
    np.testing.assert_array_equal(g.boxes, gts[0].boxes)
    assert d.score == dets[0].score and d.track_id == "t0" and d.interval == (4, 9)
    np.testing.assert_array_equal(d.boxes, dets[0].boxes)


def test_detection_end_must_match_boxes(tmp_path):
    d = fixed_tube(Detection, 0, 2, class_id=1, score=0.5)
    io.write_detections(tmp_path / "d.jsonl", [d])
    rec = json.loads((tmp_path / "d.jsonl").read_text())
    rec["end"] = 9
    (tmp_path / "d.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(io.DataError):
        io.read_detections(tmp_path / "d.jsonl")


def test_malformed_json(tmp_path):
    (tmp_path / "gt.jsonl").write_text("{not json\n")
    with pytest.raises(io.DataError):
        io.read_ground_truth(tmp_path / "gt.jsonl")


def test_missing_field(tmp_path):
    (tmp_path / "gt.jsonl").write_text(json.dumps({"video": "v", "start": 0, "boxes": [[0, 0, 1, 1]]}) + "\n")
    with pytest.raises(io.DataError):
        io.read_ground_truth(tmp_path / "gt.jsonl")


@pytest.mark.parametrize("cell,fusion,streams", [("gru", "single", ("appearance",)),
                                                  ("lstm", "fusion_layer", ("appearance", "flow")),
                                                  ("fc", "gating", ("appearance", "flow")),
                                                  ("gru", "average", ("appearance", "flow"))])
def test_checkpoint_round_trip(tmp_path, cell, fusion, streams):
    arch = Architecture(streams, (5, 3)[:len(streams)], 4, 3, 2, fusion, cell, "identity")
    model = ModelParams.initialize(arch, 0)
    model.weights[next(iter(model.weights))][0, 0] = np.pi
    save_checkpoint(tmp_path / "m.rln", model)
    back = load_checkpoint(tmp_path / "m.rln")
    assert back.arch == arch
    for k in model.weights:
        np.testing.assert_array_equal(back.weights[k], model.weights[k])
    feats = {s: np.ones((3, d)) for s, d in zip(arch.streams, arch.input_dims)}
    np.testing.assert_array_equal(forward(back, feats)[0], forward(model, feats)[0])


def test_checkpoint_corruption(tmp_path):
    model = ModelParams.initialize(Architecture(("appearance",), (2,), 2, 2, 1), 0)
    save_checkpoint(tmp_path / "m.rln", model)
    blob = (tmp_path / "m.rln").read_bytes()
    (tmp_path / "bad.rln").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.rln")
    (tmp_path / "short.rln").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.rln")
