"""Readers and writers for track, ground-truth, detection and feature files.

Track and ground-truth files hold one JSON object per line::

    {"video": "v0", "track": "t0", "start": 12, "boxes": [[x1, y1, x2, y2], ...],
     "features": {"appearance": "feats/v0_t0.appearance.tfv"}}
    {"video": "v0", "class": 2, "start": 30, "boxes": [...]}

``features`` is optional; its paths are resolved relative to the JSON file.

Feature and score matrices use the ``TFV1`` layout: the 4 magic bytes, then
``T`` and ``D`` as little-endian uint32, then ``T*D`` little-endian float32
values in row-major order.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .tracks import Detection, GroundTruthInstance, InputError, PersonTrack

TFV_MAGIC = b"TFV1"


class DataError(InputError):
    """A data file is missing, truncated or inconsistent."""


def write_tfv(path, matrix) -> None:
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    if mat.ndim != 2:
        raise InputError(f"TFV matrices are 2-D, got shape {mat.shape}")
    with open(path, "wb") as fh:
        fh.write(TFV_MAGIC)
        fh.write(struct.pack("<II", *mat.shape))
        fh.write(mat.tobytes(order="C"))


def read_tfv(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != TFV_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise DataError(f"{path}: truncated header")
    t, d = struct.unpack("<II", blob[4:12])
    if len(blob) != 12 + 4 * t * d:
        raise DataError(f"{path}: expected {t}x{d} floats, file has {len(blob) - 12} bytes")
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(t, d).astype(np.float64)


def _iter_json_lines(path) -> Iterator[dict]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc


def read_tracks(path, load_features: bool = True) -> list[PersonTrack]:
    base = Path(path).parent
    tracks = []
    for rec in _iter_json_lines(path):
        try:
            feats = {}
            if load_features:
                for stream, rel in rec.get("features", {}).items():
                    feats[stream] = read_tfv(base / rel)
            tracks.append(PersonTrack(rec["video"], rec["start"], rec["boxes"],
                                      track_id=str(rec["track"]), features=feats))
        except (KeyError, OSError) as exc:
            raise DataError(f"{path}: bad track record: {exc}") from exc
    return tracks


def write_tracks(path, tracks: Iterable[PersonTrack], feature_dir: str | None = "features") -> None:
    """Write tracks as JSON lines, with features as ``TFV1`` sidecar files."""
    path = Path(path)
    with open(path, "w") as fh:
        for tr in tracks:
            rec = {"video": tr.video_id, "track": tr.track_id, "start": tr.start_frame,
                   "boxes": tr.boxes.tolist()}
            if feature_dir is not None and tr.features:
                os.makedirs(path.parent / feature_dir, exist_ok=True)
                rec["features"] = {}
                for stream, mat in sorted(tr.features.items()):
                    rel = f"{feature_dir}/{tr.video_id}__{tr.track_id}.{stream}.tfv"
                    write_tfv(path.parent / rel, mat)
                    rec["features"][stream] = rel
            fh.write(json.dumps(rec) + "\n")


def read_ground_truth(path) -> list[GroundTruthInstance]:
    out = []
    for rec in _iter_json_lines(path):
        try:
            out.append(GroundTruthInstance(rec["video"], rec["start"], rec["boxes"],
                                           class_id=int(rec["class"])))
        except KeyError as exc:
            raise DataError(f"{path}: bad ground-truth record: missing {exc}") from exc
    return out


def write_ground_truth(path, gts: Iterable[GroundTruthInstance]) -> None:
    with open(path, "w") as fh:
        for gt in gts:
            fh.write(json.dumps({"video": gt.video_id, "class": gt.class_id,
                                 "start": gt.start_frame, "boxes": gt.boxes.tolist()}) + "\n")


def read_detections(path) -> list[Detection]:
    out = []
    for rec in _iter_json_lines(path):
        try:
            det = Detection(rec["video"], rec["start"], rec["boxes"], class_id=int(rec["class"]),
                            score=float(rec["score"]), track_id=str(rec.get("track", "")))
        except KeyError as exc:
            raise DataError(f"{path}: bad detection record: missing {exc}") from exc
        if det.end_frame != int(rec["end"]):
            raise DataError(f"{path}: detection end {rec['end']} disagrees with its boxes")
        out.append(det)
    return out


def write_detections(path, dets: Iterable[Detection]) -> None:
    with open(path, "w") as fh:
        for d in dets:
            rec = {"video": d.video_id, "class": d.class_id, "start": d.start_frame,
                   "end": d.end_frame, "score": float(d.score), "boxes": d.boxes.tolist()}
            if d.track_id:
                rec["track"] = d.track_id
            fh.write(json.dumps(rec) + "\n")
