"""Boxes, person tracks, ground-truth tubes and the IoU measures over them.

Frames are integer indices and every interval is inclusive on both ends.
Per-frame boxes are held as ``(T, 4)`` float arrays in ``x1, y1, x2, y2``
order so that tube-level IoU can be computed without Python loops.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

STREAMS = ("appearance", "flow")


class InputError(ValueError):
    """Raised for malformed geometric or temporal inputs."""


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InputError(f"degenerate box {self.as_tuple()}")
        if not np.all(np.isfinite(self.as_tuple())):
            raise InputError(f"non-finite box {self.as_tuple()}")

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def _as_boxes(boxes) -> np.ndarray:
    arr = np.array(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise InputError(f"boxes must have shape (T, 4), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError("boxes contain non-finite coordinates")
    if np.any(arr[:, 2] <= arr[:, 0]) or np.any(arr[:, 3] <= arr[:, 1]):
        raise InputError("boxes must satisfy x2 > x1 and y2 > y1")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class _Tube:
    """Contiguous run of per-frame boxes starting at ``start_frame``."""

    video_id: str
    start_frame: int
    boxes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "boxes", _as_boxes(self.boxes))
        object.__setattr__(self, "start_frame", int(self.start_frame))
        if len(self.boxes) == 0:
            raise InputError("a tube needs at least one frame")

    @property
    def end_frame(self) -> int:
        return self.start_frame + len(self.boxes) - 1

    @property
    def interval(self) -> tuple[int, int]:
        return (self.start_frame, self.end_frame)

    def __len__(self):
        return len(self.boxes)

    def box_at(self, frame: int) -> BoundingBox:
        return BoundingBox(*self.boxes[frame - self.start_frame])


@dataclass(frozen=True)
class PersonTrack(_Tube):
    track_id: str = ""
    features: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        super().__post_init__()
        feats = {}
        for stream, mat in self.features.items():
            mat = np.asarray(mat, dtype=np.float64)
            if mat.ndim != 2 or mat.shape[0] != len(self.boxes):
                raise InputError(
                    f"track {self.track_id}: {stream} features have shape "
                    f"{mat.shape}, expected ({len(self.boxes)}, D)")
            feats[stream] = mat
        object.__setattr__(self, "features", feats)

    def with_features(self, features: Mapping[str, np.ndarray]) -> "PersonTrack":
        return PersonTrack(self.video_id, self.start_frame, self.boxes,
                           track_id=self.track_id, features=dict(features))


@dataclass(frozen=True)
class GroundTruthInstance(_Tube):
    class_id: int = 1

    def __post_init__(self):
        super().__post_init__()
        if int(self.class_id) < 1:
            raise InputError("ground-truth class ids start at 1")


@dataclass(frozen=True)
class Detection(_Tube):
    class_id: int = 1
    score: float = 0.0
    track_id: str = ""

    def __post_init__(self):
        super().__post_init__()
        if not np.isfinite(self.score):
            raise InputError("detection score must be finite")


def spatial_iou(a, b) -> float:
    """Intersection over union of two boxes (``BoundingBox`` or 4-sequences)."""
    if not isinstance(a, BoundingBox):
        a = BoundingBox(*a)
    if not isinstance(b, BoundingBox):
        b = BoundingBox(*b)
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def paired_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU between two aligned ``(N, 4)`` box arrays."""
    iw = np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    ih = np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a + area_b - inter)


def temporal_iou(seg_a: Sequence[int], seg_b: Sequence[int]) -> float:
    """IoU of two inclusive frame intervals, counted in frames."""
    a0, a1 = int(seg_a[0]), int(seg_a[1])
    b0, b1 = int(seg_b[0]), int(seg_b[1])
    if a1 < a0 or b1 < b0:
        raise InputError(f"invalid interval {seg_a} or {seg_b}")
    inter = min(a1, b1) - max(a0, b0) + 1
    if inter <= 0:
        return 0.0
    union = max(a1, b1) - min(a0, b0) + 1
    return inter / union


def st_iou_components(a: _Tube, b: _Tube) -> tuple[float, float]:
    """Return ``(temporal IoU, mean spatial IoU over shared frames)``.

    The spatial term is 0 when the tubes share no frame.
    """
    o_t = temporal_iou(a.interval, b.interval)
    lo = max(a.start_frame, b.start_frame)
    hi = min(a.end_frame, b.end_frame)
    if hi < lo:
        return o_t, 0.0
    boxes_a = a.boxes[lo - a.start_frame:hi - a.start_frame + 1]
    boxes_b = b.boxes[lo - b.start_frame:hi - b.start_frame + 1]
    return o_t, float(np.mean(paired_iou(boxes_a, boxes_b)))


def st_iou(a: _Tube, b: _Tube) -> float:
    o_t, o_s = st_iou_components(a, b)
    return o_t * o_s


def assign_frame_labels(track: _Tube, gts: Sequence[GroundTruthInstance],
                        iou_thresh: float = 0.3) -> np.ndarray:
    """Per-frame class labels for a track, 0 meaning background.

    A frame takes the class of a ground-truth tube whose box on that frame
    overlaps the track box by strictly more than ``iou_thresh``. Competing
    classes are resolved by larger IoU, then by smaller class id.
    """
    n = len(track)
    labels = np.zeros(n, dtype=np.int64)
    best = np.full(n, -np.inf)
    for gt in sorted(gts, key=lambda g: g.class_id):
        if gt.video_id != track.video_id:
            continue
        lo = max(track.start_frame, gt.start_frame)
        hi = min(track.end_frame, gt.end_frame)
        if hi < lo:
            continue
        sl = slice(lo - track.start_frame, hi - track.start_frame + 1)
        ious = paired_iou(track.boxes[sl], gt.boxes[lo - gt.start_frame:hi - gt.start_frame + 1])
        win = (ious > iou_thresh) & (ious > best[sl])
        labels[sl][win] = gt.class_id
        best[sl][win] = ious[win]
    return labels
