"""scikit-learn compatible wrappers around the scorer and the localizer.

``TrackScorer`` consumes variable-length sequences, so ``X`` is a list of
tracks (``PersonTrack`` or ``{stream: (T, D) array}``) and ``y`` a list of
per-frame label arrays rather than 2-D arrays.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .localization import LocalizationConfig, TrackScores, ViterbiConfig, localize_all
from .recurrent import Architecture, LabeledTrack, TrainConfig, forward, train_scorer
from .tracks import PersonTrack


def check_track_features(X, streams: Sequence[str]) -> list[dict[str, np.ndarray]]:
    """Normalise ``X`` to a list of ``{stream: float64 (T, D)}`` dicts."""
    if isinstance(X, (PersonTrack, dict)):
        raise ValueError("X must be a sequence of tracks, not a single track")
    out = []
    for i, item in enumerate(X):
        feats = item.features if isinstance(item, PersonTrack) else item
        row = {}
        for s in streams:
            if s not in feats:
                raise ValueError(f"track {i} lacks stream {s!r}")
            mat = np.asarray(feats[s], dtype=np.float64)
            if mat.ndim != 2 or not np.all(np.isfinite(mat)):
                raise ValueError(f"track {i}: stream {s!r} must be a finite (T, D) array")
            row[s] = mat
        if len({m.shape[0] for m in row.values()}) != 1:
            raise ValueError(f"track {i}: streams have different lengths")
        out.append(row)
    if not out:
        raise ValueError("X is empty")
    dims = {s: {r[s].shape[1] for r in out} for s in streams}
    for s, d in dims.items():
        if len(d) != 1:
            raise ValueError(f"stream {s!r} has inconsistent feature sizes {sorted(d)}")
    return out


def check_frame_labels(y, X_checked) -> list[np.ndarray]:
    if len(y) != len(X_checked):
        raise ValueError(f"got {len(y)} label sequences for {len(X_checked)} tracks")
    out = []
    for i, (lab, feats) in enumerate(zip(y, X_checked)):
        lab = np.asarray(lab)
        if lab.ndim != 1 or len(lab) != next(iter(feats.values())).shape[0]:
            raise ValueError(f"track {i}: labels must be one integer per frame")
        if not np.issubdtype(lab.dtype, np.integer) or lab.min() < 0:
            raise ValueError(f"track {i}: labels must be non-negative integers")
        out.append(lab.astype(np.int64))
    return out


class TrackScorer(BaseEstimator):
    """Per-frame action classifier over person tracks.

    Parameters
    ----------
    cell : {"gru", "lstm", "fc"}
        Recurrent cell, or the stateless FC replacement.
    fusion : {"single", "average", "gating", "fusion_layer"}
        How the streams are combined; ``single`` uses ``streams[0]`` only.
    streams : tuple of str
        Feature streams read from each track.
    hidden, norm_dim : int
        Memory size of each cell and width of the input normalisation layer.
    batch_size, window, steps, head_steps, lr, weight_decay, bptt
        Training schedule; see :class:`trackloc.recurrent.TrainConfig`.
    n_classes : int or None
        Number of action classes; inferred from ``y`` when None.
    random_state : int
        Seed for initialisation and batch sampling.
    """

    def __init__(self, cell="gru", fusion="fusion_layer", streams=("appearance", "flow"),
                 hidden=16, norm_dim=16, norm_activation="tanh", batch_size=32, window=20,
                 steps=300, head_steps=None, lr=1e-3, weight_decay=5e-4, bptt=20,
                 n_classes=None, random_state=0):
        self.cell = cell
        self.fusion = fusion
        self.streams = streams
        self.hidden = hidden
        self.norm_dim = norm_dim
        self.norm_activation = norm_activation
        self.batch_size = batch_size
        self.window = window
        self.steps = steps
        self.head_steps = head_steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.bptt = bptt
        self.n_classes = n_classes
        self.random_state = random_state

    def _streams(self):
        return tuple(self.streams[:1]) if self.fusion == "single" else tuple(self.streams)

    def fit(self, X, y):
        streams = self._streams()
        feats = check_track_features(X, streams)
        labels = check_frame_labels(y, feats)
        n_classes = self.n_classes or int(max(lab.max() for lab in labels))
        if max(lab.max() for lab in labels) > n_classes:
            raise ValueError(f"labels exceed n_classes={n_classes}")
        arch = Architecture(streams, tuple(feats[0][s].shape[1] for s in streams), self.norm_dim,
                            self.hidden, n_classes, self.fusion, self.cell, self.norm_activation)
        cfg = TrainConfig(batch_size=self.batch_size, window=self.window, steps=self.steps,
                          head_steps=self.head_steps, lr=self.lr, weight_decay=self.weight_decay,
                          bptt=self.bptt, seed=self.random_state)
        res = train_scorer([LabeledTrack(f, lab) for f, lab in zip(feats, labels)], arch, cfg)
        self.model_ = res.model
        self.loss_curve_ = res.losses
        self.n_classes_ = n_classes
        self.classes_ = np.arange(n_classes + 1)
        return self

    def predict_proba(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        feats = check_track_features(X, self.model_.arch.streams)
        return [forward(self.model_, f)[0] for f in feats]

    def predict(self, X) -> list[np.ndarray]:
        return [p.argmax(axis=1) for p in self.predict_proba(X)]

    def score(self, X, y) -> float:
        """Frame-level accuracy over all tracks."""
        pred = np.concatenate(self.predict(X))
        return float(np.mean(pred == np.concatenate([np.asarray(v) for v in y])))


class TrackLocalizer(BaseEstimator):
    """Turns scored tracks into spatio-temporal detections (stateless).

    ``method="threshold"`` median-filters and thresholds each class column;
    ``method="viterbi"`` uses the binary Viterbi labelling instead. Both are
    followed by per-(video, class) spatio-temporal NMS.
    """

    def __init__(self, theta=0.1, median_window=25, nms_overlap=0.2, top_k=40,
                 method="threshold", viterbi_alpha=5.0):
        self.theta = theta
        self.median_window = median_window
        self.nms_overlap = nms_overlap
        self.top_k = top_k
        self.method = method
        self.viterbi_alpha = viterbi_alpha

    def fit(self, X=None, y=None):
        self.config_ = LocalizationConfig(self.theta, self.median_window, self.nms_overlap, self.top_k)
        self.viterbi_ = ViterbiConfig(alpha=self.viterbi_alpha)
        if self.method not in ("threshold", "viterbi"):
            raise ValueError(f"unknown method {self.method!r}")
        return self

    def predict(self, tracks: Sequence[PersonTrack], scores: Sequence[np.ndarray]):
        if not hasattr(self, "config_"):
            self.fit()
        if len(tracks) != len(scores):
            raise ValueError("need one score matrix per track")
        items = [TrackScores(t, np.asarray(s, dtype=np.float64)) for t, s in zip(tracks, scores)]
        return localize_all(items, self.config_, self.method, self.viterbi_)
