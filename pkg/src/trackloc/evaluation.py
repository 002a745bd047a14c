"""Detection-level evaluation: ST-IoU matching, average precision and mAP.

AP is the area under the precision envelope (precision at each recall level
replaced by the best precision at any equal or higher recall), summed over
the recall increments contributed by true positives.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter, defaultdict
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .tracks import Detection, GroundTruthInstance, st_iou_components

log = logging.getLogger(__name__)

ASSUMPTIONS = ("classification", "spatial", "temporal")
IDEAL_OVERLAP = 0.3


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.75)
    class_subset: tuple[int, ...] | None = None

    def __post_init__(self):
        th = tuple(float(t) for t in self.iou_thresholds)
        if not th or any(not 0.0 < t <= 1.0 for t in th) or any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError(f"IoU thresholds must be strictly increasing in (0, 1]: {th}")
        object.__setattr__(self, "iou_thresholds", th)
        if self.class_subset is not None:
            object.__setattr__(self, "class_subset", tuple(sorted(int(c) for c in self.class_subset)))


@dataclass
class MatchResult:
    """Outcome of matching one class's detections at one IoU threshold.

    ``detections`` is in ranking order; ``matched_gt[i]`` indexes the
    ground-truth list given to :func:`match_detections` or is ``None``.
    """
    detections: list[Detection]
    is_tp: np.ndarray
    matched_gt: list[int | None]
    n_gt: int

    @property
    def scores(self) -> np.ndarray:
        return np.array([d.score for d in self.detections], dtype=np.float64)

    @property
    def recall(self) -> float:
        return float(self.is_tp.sum()) / self.n_gt if self.n_gt else float("nan")


def rank_order(dets: Sequence[Detection]) -> list[int]:
    """Descending score, ties broken by earlier start frame."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].start_frame))


def _overlap(det, gt, spatial, temporal):
    o_t, o_s = st_iou_components(det, gt)
    if spatial and o_s > IDEAL_OVERLAP:
        o_s = 1.0
    if temporal and o_t > IDEAL_OVERLAP:
        o_t = 1.0
    return o_t * o_s


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthInstance], class_id: int,
                     iou_t: float, spatial: bool = False, temporal: bool = False) -> MatchResult:
    """Greedy matching of ``class_id`` detections to same-video, same-class ground truth.

    In ranking order each detection claims the unclaimed ground truth of
    largest ST-IoU if that IoU exceeds ``iou_t``; anything else, including a
    second hit on an already claimed instance, is a false positive.
    ``spatial``/``temporal`` raise the respective overlap factor to 1 when it
    exceeds 0.3.
    """
    dets = [d for d in dets if d.class_id == class_id]
    dets = [dets[i] for i in rank_order(dets)]
    gt_idx = [i for i, g in enumerate(gts) if g.class_id == class_id]
    by_video = defaultdict(list)
    for i in gt_idx:
        by_video[gts[i].video_id].append(i)
    claimed = set()
    is_tp = np.zeros(len(dets), dtype=bool)
    matched: list[int | None] = []
    for k, d in enumerate(dets):
        best, best_iou = None, iou_t
        for i in by_video.get(d.video_id, ()):
            if i in claimed:
                continue
            o = _overlap(d, gts[i], spatial, temporal)
            if o > best_iou:
                best, best_iou = i, o
        if best is not None:
            claimed.add(best)
            is_tp[k] = True
        matched.append(best)
    return MatchResult(dets, is_tp, matched, len(gt_idx))


def ap_from_flags(is_tp, n_gt: int) -> float:
    """Envelope AP of a ranked TP/FP sequence against ``n_gt`` positives.

    Precision values are ratios of small integers, so the area is summed in
    exact rational arithmetic and rounded once.
    """
    is_tp = np.asarray(is_tp, dtype=bool)
    if n_gt <= 0:
        return float("nan")
    if is_tp.size == 0 or not is_tp.any():
        return 0.0
    tp = np.cumsum(is_tp)
    rank = np.arange(1, is_tp.size + 1)
    precision = tp / rank
    # index of the best precision at or after each rank (equal ratios round equally)
    best = np.empty(is_tp.size, dtype=np.int64)
    best[-1] = is_tp.size - 1
    for i in range(is_tp.size - 2, -1, -1):
        j = best[i + 1]
        best[i] = i if precision[i] >= precision[j] else j
    levels = Counter(int(best[i]) for i in np.flatnonzero(is_tp))
    area = sum(Fraction(int(tp[j]) * n, int(rank[j])) for j, n in levels.items())
    return float(area / n_gt)


def average_precision(match: MatchResult, scores=None) -> float:
    """AP of a match result; ``scores`` optionally re-ranks its detections.

    Re-ranking is stable with respect to the match order, so ties keep the
    order in which the detections were matched.
    """
    flags = match.is_tp
    if scores is not None:
        order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
        flags = flags[order]
    return ap_from_flags(flags, match.n_gt)


@dataclass
class APTable:
    thresholds: tuple[float, ...]
    classes: list[int]
    ap: dict[tuple[float, int], float] = field(default_factory=dict)
    n_gt: dict[int, int] = field(default_factory=dict)
    n_det: dict[int, int] = field(default_factory=dict)
    subset: tuple[int, ...] | None = None

    def evaluated_classes(self) -> list[int]:
        return [c for c in self.classes if self.n_gt.get(c, 0) > 0]

    def mean(self, iou_t: float, classes: Iterable[int] | None = None) -> float:
        pool = self.evaluated_classes() if classes is None else [
            c for c in classes if self.n_gt.get(c, 0) > 0]
        vals = [self.ap[(iou_t, c)] for c in pool]
        return float(np.mean(vals)) if vals else float("nan")

    def map(self, iou_t: float) -> float:
        return self.mean(iou_t)

    def map_subset(self, iou_t: float) -> float:
        return self.mean(iou_t, self.subset) if self.subset else float("nan")

    def write_csv(self, path) -> None:
        """Per-class rows, then ``mAP`` and ``mAP-subset`` summary rows per threshold."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iou_threshold", "class_id", "ap", "n_gt", "n_det"])
            for t in self.thresholds:
                for c in self.classes:
                    w.writerow([_fmt(t), c, _fmt(self.ap.get((t, c), float("nan"))),
                                self.n_gt.get(c, 0), self.n_det.get(c, 0)])
            n_gt = sum(self.n_gt.get(c, 0) for c in self.evaluated_classes())
            n_det = sum(self.n_det.values())
            for t in self.thresholds:
                w.writerow([_fmt(t), "mAP", _fmt(self.map(t)), n_gt, n_det])
                if self.subset:
                    w.writerow([_fmt(t), "mAP-subset", _fmt(self.map_subset(t)),
                                sum(self.n_gt.get(c, 0) for c in self.subset),
                                sum(self.n_det.get(c, 0) for c in self.subset)])


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def correctness_analysis(dets: Sequence[Detection], gts: Sequence[GroundTruthInstance],
                         assumptions: Iterable[str] = (), iou_t: float = 0.75,
                         class_subset=None, classes=None) -> APTable:
    """mAP with selected pipeline components idealised.

    ``spatial`` / ``temporal`` set the corresponding overlap factor to 1 when
    it exceeds 0.3; ``classification`` zeroes every false positive's score
    after matching, which pushes false positives below all true positives.
    """
    assumptions = set(assumptions)
    unknown = assumptions - set(ASSUMPTIONS)
    if unknown:
        raise ValueError(f"unknown assumptions {sorted(unknown)}")
    return _evaluate(dets, gts, (iou_t,), class_subset, classes,
                     spatial="spatial" in assumptions, temporal="temporal" in assumptions,
                     perfect_classification="classification" in assumptions)


def mean_ap(dets: Sequence[Detection], gts: Sequence[GroundTruthInstance],
            cfg: EvalConfig = EvalConfig(), classes=None) -> APTable:
    return _evaluate(dets, gts, cfg.iou_thresholds, cfg.class_subset, classes)


def _evaluate(dets, gts, thresholds, subset, classes, spatial=False, temporal=False,
              perfect_classification=False) -> APTable:
    if classes is None:
        classes = sorted({g.class_id for g in gts} | {d.class_id for d in dets})
    table = APTable(tuple(thresholds), list(classes), subset=subset)
    for c in classes:
        table.n_gt[c] = sum(1 for g in gts if g.class_id == c)
        table.n_det[c] = sum(1 for d in dets if d.class_id == c)
        if table.n_gt[c] == 0:
            log.warning("class %d has no ground truth; excluded from mAP", c)
    for t in thresholds:
        for c in classes:
            m = match_detections(dets, gts, c, t, spatial=spatial, temporal=temporal)
            scores = None
            if perfect_classification:
                # zeroed false positives must also rank below zero-score true positives
                scores = np.where(m.is_tp, m.scores, -np.inf)
            table.ap[(t, c)] = average_precision(m, scores)
    return table


def short_class_split(gts: Sequence[GroundTruthInstance], video_lengths: Mapping[str, int],
                      ratio: float = 0.5) -> list[int]:
    """Classes whose instances last, on average, less than ``ratio`` of their video."""
    per_class = defaultdict(list)
    for g in gts:
        per_class[g.class_id].append(len(g) / video_lengths[g.video_id])
    return sorted(c for c, r in per_class.items() if np.mean(r) < ratio)
