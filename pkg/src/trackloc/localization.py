"""Temporal segmentation of scored tracks into spatio-temporal detections."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tracks import Detection, InputError, PersonTrack, st_iou


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LocalizationConfig:
    theta: float = 0.1
    median_window: int = 25
    nms_overlap: float = 0.2
    top_k: int = 40

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ConfigError(f"theta must lie in (0, 1), got {self.theta}")
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise ConfigError(f"median window must be odd and positive, got {self.median_window}")
        if not 0.0 <= self.nms_overlap <= 1.0:
            raise ConfigError(f"nms overlap must lie in [0, 1], got {self.nms_overlap}")
        if self.top_k < 1:
            raise ConfigError("top_k must be at least 1")


@dataclass(frozen=True)
class ViterbiConfig:
    alpha: float | Mapping[int, float] = 5.0
    floor: float = 1e-6

    def __post_init__(self):
        if not self.floor > 0:
            raise ConfigError("probability floor must be positive")
        values = self.alpha.values() if isinstance(self.alpha, Mapping) else [self.alpha]
        if any(not np.isfinite(a) or a < 0 for a in values):
            raise ConfigError("smoothness weights must be finite and non-negative")

    def alpha_for(self, class_id: int) -> float:
        if isinstance(self.alpha, Mapping):
            return float(self.alpha.get(class_id, 5.0))
        return float(self.alpha)


def median_filter(scores, window: int) -> np.ndarray:
    """Running median with the window truncated at both ends.

    Even-sized boundary windows take the lower of the two middle values.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"median window must be odd and positive, got {window}")
    s = np.asarray(scores, dtype=np.float64)
    n, half = len(s), window // 2
    out = np.empty(n)
    if n >= window:
        full = sliding_window_view(s, window)
        out[half:n - half] = np.partition(full, half, axis=1)[:, half]
        edges = list(range(half)) + list(range(n - half, n))
    else:
        edges = range(n)
    for t in edges:
        vals = np.sort(s[max(0, t - half):t + half + 1])
        out[t] = vals[(len(vals) - 1) // 2]
    return out


def threshold_segment(smoothed, theta: float) -> list[tuple[int, int]]:
    """Maximal runs of consecutive frames with score >= theta, as inclusive index pairs."""
    above = np.asarray(smoothed) >= theta
    if not above.any():
        return []
    padded = np.concatenate([[False], above, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return [(int(a), int(b) - 1) for a, b in zip(edges[::2], edges[1::2])]


def score_subtrack(raw_scores, top_k: int = 40) -> float:
    """Mean of the ``top_k`` largest raw scores (all of them if fewer)."""
    s = np.asarray(raw_scores, dtype=np.float64)
    if s.size == 0:
        raise InputError("cannot score an empty sub-track")
    k = min(top_k, s.size)
    return float(np.mean(np.partition(s, s.size - k)[s.size - k:]))


def _nms_order(d: Detection):
    return (-d.score, d.start_frame, -len(d))


def st_nms(dets: Sequence[Detection], overlap: float) -> list[Detection]:
    """Greedy spatio-temporal NMS over detections of one class and video.

    Ties in score prefer the earlier start, then the longer detection.
    """
    remaining = sorted(dets, key=_nms_order)
    keep = []
    while remaining:
        best = remaining.pop(0)
        keep.append(best)
        remaining = [d for d in remaining if st_iou(best, d) <= overlap]
    return keep


def nms_by_video_class(dets: Iterable[Detection], overlap: float) -> list[Detection]:
    groups = defaultdict(list)
    for d in dets:
        groups[(d.video_id, d.class_id)].append(d)
    out = []
    for key in sorted(groups):
        out.extend(st_nms(groups[key], overlap))
    return out


def _to_detections(track: PersonTrack, raw, intervals, class_id, top_k):
    out = []
    for a, b in intervals:
        out.append(Detection(track.video_id, track.start_frame + a, track.boxes[a:b + 1],
                             class_id=class_id, score=score_subtrack(raw[a:b + 1], top_k),
                             track_id=track.track_id))
    return out


def _class_column(track, scores, class_id):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or len(scores) != len(track):
        raise InputError(f"track {track.track_id}: scores of shape {scores.shape} do not match "
                         f"{len(track)} frames")
    if not 1 <= class_id < scores.shape[1]:
        raise InputError(f"class {class_id} outside score columns 1..{scores.shape[1] - 1}")
    return scores[:, class_id]


def localize(track: PersonTrack, scores, class_id: int,
             cfg: LocalizationConfig = LocalizationConfig()) -> list[Detection]:
    """Median-filter, threshold and score one class column of a scored track."""
    raw = _class_column(track, scores, class_id)
    intervals = threshold_segment(median_filter(raw, cfg.median_window), cfg.theta)
    return _to_detections(track, raw, intervals, class_id, cfg.top_k)


def viterbi_labels(scores, alpha: float, floor: float = 1e-6) -> np.ndarray:
    """Binary MAP labelling of a score sequence.

    Maximises ``sum_t [y_t log s_t + (1 - y_t) log(1 - s_t)] - alpha * #switches``.
    Ties are resolved towards label 1.
    """
    s = np.clip(np.asarray(scores, dtype=np.float64), floor, 1.0 - floor)
    n = len(s)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    unary = np.stack([np.log1p(-s), np.log(s)], axis=1)
    value = unary[0].copy()
    back = np.zeros((n, 2), dtype=np.int64)
    for t in range(1, n):
        new = np.empty(2)
        for y in (0, 1):
            stay, switch = value[y], value[1 - y] - alpha
            # prefer predecessor 1 on ties
            if y == 1:
                back[t, y] = 1 if stay >= switch else 0
            else:
                back[t, y] = 1 if switch >= stay else 0
            new[y] = max(stay, switch) + unary[t, y]
        value = new
    labels = np.empty(n, dtype=np.int64)
    labels[-1] = 1 if value[1] >= value[0] else 0
    for t in range(n - 1, 0, -1):
        labels[t - 1] = back[t, labels[t]]
    return labels


def viterbi_segment(scores, cfg: ViterbiConfig = ViterbiConfig(), class_id: int | None = None):
    """Runs of label 1 in the Viterbi labelling, as inclusive index pairs."""
    alpha = cfg.alpha_for(class_id) if class_id is not None else cfg.alpha_for(-1)
    return threshold_segment(viterbi_labels(scores, alpha, cfg.floor), 0.5)


def viterbi_localize(track: PersonTrack, scores, class_id: int, cfg: ViterbiConfig = ViterbiConfig(),
                     top_k: int = 40) -> list[Detection]:
    raw = _class_column(track, scores, class_id)
    return _to_detections(track, raw, viterbi_segment(raw, cfg, class_id), class_id, top_k)


@dataclass
class TrackScores:
    """A track paired with its ``(T, C + 1)`` score matrix."""
    track: PersonTrack
    scores: np.ndarray = field(repr=False)


def localize_all(scored: Iterable[TrackScores], cfg: LocalizationConfig = LocalizationConfig(),
                 method: str = "threshold", viterbi: ViterbiConfig = ViterbiConfig()) -> list[Detection]:
    """Localize every class on every track, then NMS per (video, class)."""
    cands = []
    for item in scored:
        for c in range(1, np.shape(item.scores)[1]):
            if method == "threshold":
                cands += localize(item.track, item.scores, c, cfg)
            elif method == "viterbi":
                cands += viterbi_localize(item.track, item.scores, c, viterbi, cfg.top_k)
            else:
                raise ConfigError(f"unknown localization method {method!r}")
    return nms_by_video_class(cands, cfg.nms_overlap)
