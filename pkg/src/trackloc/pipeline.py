"""End-to-end composition: labelled tracks -> scorer -> detections -> AP table."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .evaluation import APTable, EvalConfig, mean_ap
from .localization import LocalizationConfig, TrackScores, ViterbiConfig, localize_all
from .recurrent import Architecture, LabeledTrack, ModelParams, TrainConfig, forward, train_scorer
from .tracks import GroundTruthInstance, PersonTrack, assign_frame_labels


def labeled_tracks(tracks: Sequence[PersonTrack], gts: Sequence[GroundTruthInstance],
                   iou_thresh: float = 0.3) -> list[LabeledTrack]:
    by_video: dict[str, list] = {}
    for g in gts:
        by_video.setdefault(g.video_id, []).append(g)
    return [LabeledTrack(t.features, assign_frame_labels(t, by_video.get(t.video_id, []), iou_thresh))
            for t in tracks]


def score_tracks(model: ModelParams, tracks: Sequence[PersonTrack]) -> list[TrackScores]:
    """Run the scorer over each whole track, hidden state starting at zero."""
    out = []
    for t in tracks:
        probs, _ = forward(model, {s: t.features[s] for s in model.arch.streams})
        out.append(TrackScores(t, probs))
    return out


def uniform_scores(tracks: Sequence[PersonTrack], n_classes: int) -> list[TrackScores]:
    return [TrackScores(t, np.full((len(t), n_classes + 1), 1.0 / (n_classes + 1))) for t in tracks]


def architecture_for(tracks: Sequence[PersonTrack], n_classes: int, streams: Sequence[str],
                     fusion: str = "fusion_layer", cell: str = "gru", hidden: int = 16,
                     norm_dim: int = 16, norm_activation: str = "tanh") -> Architecture:
    dims = tuple(tracks[0].features[s].shape[1] for s in streams)
    return Architecture(tuple(streams), dims, norm_dim, hidden, n_classes, fusion, cell, norm_activation)


def fit_and_evaluate(train_tracks, train_gts, test_tracks, test_gts, arch: Architecture,
                     train_cfg: TrainConfig, loc_cfg: LocalizationConfig = LocalizationConfig(),
                     eval_cfg: EvalConfig = EvalConfig(), method: str = "threshold",
                     viterbi: ViterbiConfig = ViterbiConfig()) -> APTable:
    model = train_scorer(labeled_tracks(train_tracks, train_gts), arch, train_cfg).model
    dets = localize_all(score_tracks(model, test_tracks), loc_cfg, method, viterbi)
    return mean_ap(dets, test_gts, eval_cfg, classes=range(1, arch.n_classes + 1))
