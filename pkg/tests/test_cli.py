import csv
import json
import subprocess
import sys

import numpy as np
import pytest

import oracles
from trackloc import io
from trackloc.cli import CURVE_COLUMNS, main
from trackloc.tracks import Detection, PersonTrack, st_iou

TINY = """\
[run]
seed = 5

[generate]
n_videos = 3
test_videos = 2
frames_per_video = 60
track_length = 40, 60
segment_length = 10, 20
min_gap = 5
feature_dims = 4, 3

[train]
hidden = 4
norm_dim = 4
steps = 8
batch_size = 4

[localize]
median_window = 5

[evaluate]
iou_thresholds = 0.1, 0.3, 0.5
assumptions = all
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(TINY)
    return path


def run(config, out, *cmds, extra=()):
    for cmd in cmds:
        code = main([cmd, "--config", str(config), "--out", str(out), *extra])
        if code:
            return code
    return 0


@pytest.fixture
def pipeline(config, tmp_path):
    out = tmp_path / "out"
    assert run(config, out, "generate", "train", "score", "localize", "evaluate", "export-curves") == 0
    return out


def test_manifest_lists_files_with_digests(config, tmp_path):
    for name in ("a", "b"):
        assert run(config, tmp_path / name, "generate") == 0
    ma = json.loads((tmp_path / "a/data/manifest.json").read_text())
    mb = json.loads((tmp_path / "b/data/manifest.json").read_text())
    assert ma["files"] == mb["files"]
    names = set(ma["files"])
    assert {"train/tracks.jsonl", "train/gt.jsonl", "test/tracks.jsonl", "test/gt.jsonl"} <= names
    assert any(n.startswith("train/features/") and n.endswith(".tfv") for n in names)
    assert ma["n_classes"] == 3 and ma["streams"] == ["appearance", "flow"]


def test_different_seed_changes_digests(config, tmp_path):
    run(config, tmp_path / "a", "generate")
    run(config, tmp_path / "b", "generate", extra=("--seed", "6"))
    ma = json.loads((tmp_path / "a/data/manifest.json").read_text())
    mb = json.loads((tmp_path / "b/data/manifest.json").read_text())
    assert ma["files"]["train/gt.jsonl"] != mb["files"]["train/gt.jsonl"]


def test_full_pipeline_outputs(pipeline):
    assert (pipeline / "model/checkpoint.rln").is_file()
    losses = list(csv.reader((pipeline / "model/loss.csv").open()))
    assert losses[0] == ["step", "loss"] and len(losses) == 1 + 3 * 8
    rows = list(csv.DictReader((pipeline / "results.csv").open()))
    assert {r["class_id"] for r in rows} >= {"1", "mAP"}
    corr = list(csv.DictReader((pipeline / "results_correctness.csv").open()))
    assert len(corr) == 8


def test_scores_are_distributions_and_idempotent(pipeline, config):
    files = sorted((pipeline / "scores/test").glob("*.tfv"))
    assert files
    before = {f.name: f.read_bytes() for f in files}
    for f in files:
        s = io.read_tfv(f)
        assert s.shape[1] == 4
        np.testing.assert_allclose(s.sum(1), 1.0, atol=1e-6)  # float32 storage
    assert run(config, pipeline, "score") == 0
    assert {f.name: f.read_bytes() for f in files} == before


def test_single_frame_track_scores_one_row(pipeline, config):
    tracks_path = pipeline / "data/test/tracks.jsonl"
    tracks = io.read_tracks(tracks_path)
    t0 = tracks[0]
    short = PersonTrack(t0.video_id, t0.start_frame, t0.boxes[:1], track_id="single",
                        features={s: x[:1] for s, x in t0.features.items()})
    io.write_tracks(tracks_path, tracks + [short])
    assert run(config, pipeline, "score") == 0
    assert io.read_tfv(pipeline / f"scores/test/{t0.video_id}__single.tfv").shape == (1, 4)


def test_jobs_do_not_change_scores(pipeline, config):
    before = {f.name: f.read_bytes() for f in (pipeline / "scores/test").glob("*.tfv")}
    assert run(config, pipeline, "score", extra=("--jobs", "4")) == 0
    assert {f.name: f.read_bytes() for f in (pipeline / "scores/test").glob("*.tfv")} == before


def test_detections_form_antichain(pipeline):
    dets = io.read_detections(pipeline / "detections.jsonl")
    groups = {}
    for d in dets:
        groups.setdefault((d.video_id, d.class_id), []).append(d)
    for group in groups.values():
        for i, a in enumerate(group):
            for b in group[i + 1:]:
                assert st_iou(a, b) <= 0.2


def test_empty_scores_give_empty_detections(config, tmp_path):
    out = tmp_path / "out"
    assert run(config, out, "generate", "localize") == 0
    assert (out / "detections.jsonl").read_text() == ""


def test_curves_reproduce_kernels(pipeline):
    files = sorted((pipeline / "curves/test").glob("*.csv"))
    assert files
    for f in files[:3]:
        rows = list(csv.DictReader(f.open()))
        assert list(rows[0]) == CURVE_COLUMNS
        for c in {r["class_id"] for r in rows}:
            sub = [r for r in rows if r["class_id"] == c]
            raw = [float(r["raw_score"]) for r in sub]
            assert [float(r["filtered_score"]) for r in sub] == oracles.median_filter(raw, 5)
            segs = oracles.threshold_segment([float(r["filtered_score"]) for r in sub], 0.1)
            got = {}
            for t, r in enumerate(sub):
                if r["segment"] != "-1":
                    got.setdefault(int(r["segment"]), []).append(t)
            assert [(v[0], v[-1]) for _, v in sorted(got.items())] == segs


def test_evaluate_perfect_detections(pipeline, config):
    gts = io.read_ground_truth(pipeline / "data/test/gt.jsonl")
    io.write_detections(pipeline / "detections.jsonl",
                        [Detection(g.video_id, g.start_frame, g.boxes, class_id=g.class_id, score=1.0) for g in gts])
    assert run(config, pipeline, "evaluate") == 0
    rows = [r for r in csv.DictReader((pipeline / "results.csv").open()) if r["class_id"] == "mAP"]
    assert [float(r["ap"]) for r in rows] == [1.0, 1.0, 1.0]


def test_evaluate_matches_oracle(pipeline):
    dets = io.read_detections(pipeline / "detections.jsonl")
    gts = io.read_ground_truth(pipeline / "data/test/gt.jsonl")
    want = oracles.evaluate([(d.video_id, d.class_id, d.start_frame, d.boxes.tolist(), d.score) for d in dets],
                            [(g.video_id, g.class_id, g.start_frame, g.boxes.tolist()) for g in gts],
                            (0.1, 0.3, 0.5), [1, 2, 3])
    maps = []
    for row in csv.DictReader((pipeline / "results.csv").open()):
        key = (float(row["iou_threshold"]), row["class_id"])
        if key[1].isdigit():
            v = want[(key[0], int(key[1]))]
            assert (np.isnan(v) and row["ap"] == "nan") or abs(float(row["ap"]) - v) <= 1e-12
        elif key[1] == "mAP":
            maps.append(float(row["ap"]))
    assert maps == sorted(maps, reverse=True)


def test_missing_seed_is_config_error(tmp_path):
    (tmp_path / "c.ini").write_text(TINY.replace("seed = 5", ""))
    assert run(tmp_path / "c.ini", tmp_path / "o", "generate") == 2


@pytest.mark.parametrize("override", ["localize.median_window=4", "train.cell=rnn", "generate.sigma=0",
                                      "evaluate.assumptions=luck", "nodot=1"])
def test_bad_values_are_config_errors(config, tmp_path, override):
    assert run(config, tmp_path / "o", "generate", extra=("--set", override)) == 2


def test_inline_comments(tmp_path):
    (tmp_path / "c.ini").write_text(TINY.replace("test_videos = 2", "test_videos = 1  ; held out") + "# end\n")
    assert run(tmp_path / "c.ini", tmp_path / "o", "generate") == 0
    assert {g.video_id for g in io.read_tracks(tmp_path / "o/data/test/tracks.jsonl", load_features=False)} == {"test000"}


def test_unwritable_output_is_data_error(config, tmp_path):
    blocker = tmp_path / "not_a_dir"
    blocker.write_text("x")
    assert run(config, blocker / "out", "generate") == 3


def test_missing_dataset_is_data_error(config, tmp_path):
    assert run(config, tmp_path / "nothing", "train") == 3


def test_divergence_exit_code(config, tmp_path, capsys):
    out = tmp_path / "out"
    assert run(config, out, "generate") == 0
    for f in (out / "data/train/features").glob("*.appearance.tfv"):
        x = io.read_tfv(f)
        x[:] = np.nan
        io.write_tfv(f, x)
    assert run(config, out, "train") == 4
    assert "diverged" in capsys.readouterr().err


def test_feature_dimension_mismatch(pipeline, config):
    for f in (pipeline / "data/test/features").glob("*.flow.tfv"):
        io.write_tfv(f, np.zeros((io.read_tfv(f).shape[0], 7)))
    assert run(config, pipeline, "score") == 3


def test_module_entry_point(config, tmp_path):
    res = subprocess.run([sys.executable, "-m", "trackloc.cli", "generate", "--config", str(config),
                          "--out", str(tmp_path / "o"), "--seed", "2"], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert json.loads((tmp_path / "o/data/manifest.json").read_text())["seed"] == 2
