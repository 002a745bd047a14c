"""Mini-batch training over fixed-length windows of labelled tracks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .network import Architecture, ModelParams, compose_streams, loss_and_grads
from .optim import AdamState, TrainingError, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    window: int = 20
    steps: int = 300
    head_steps: int | None = None
    lr: float = 1e-3
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bptt: int = 20
    seed: int = 0


@dataclass
class LabeledTrack:
    features: Mapping[str, np.ndarray]
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


@dataclass
class TrainResult:
    model: ModelParams
    losses: list[float] = field(default_factory=list)


def sample_batch(data: Sequence[LabeledTrack], streams, cfg: TrainConfig, rng):
    """Draw up to ``batch_size`` distinct tracks and one window from each.

    Tracks shorter than the window are zero-padded; padded frames are masked
    out of the loss.
    """
    n = len(data)
    picks = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
    L = cfg.window
    feats = {s: np.zeros((len(picks), L, data[0].features[s].shape[1])) for s in streams}
    labels = np.zeros((len(picks), L), dtype=np.int64)
    mask = np.zeros((len(picks), L))
    for b, i in enumerate(picks):
        tr = data[i]
        T = len(tr)
        start = int(rng.integers(0, T - L + 1)) if T > L else 0
        span = min(L, T)
        for s in streams:
            feats[s][b, :span] = tr.features[s][start:start + span]
        labels[b, :span] = tr.labels[start:start + span]
        mask[b, :span] = 1.0
    return feats, labels, mask


def train(model: ModelParams, data: Sequence[LabeledTrack], cfg: TrainConfig,
          trainable: set[str] | None = None, steps: int | None = None) -> TrainResult:
    """Adam training on windowed batches; returns a new model and the loss curve.

    The curve holds the mean per-frame NLL of each batch. Parameters outside
    ``trainable`` stay fixed.
    """
    if not data:
        raise ValueError("training set is empty")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                      weight_decay=cfg.weight_decay)
    wrt = set(model.weights) if trainable is None else set(trainable)
    losses: list[float] = []
    n_steps = cfg.steps if steps is None else steps
    for step in range(n_steps):
        feats, labels, mask = sample_batch(data, model.arch.streams, cfg, rng)
        n_valid = mask.sum()
        loss, grads = loss_and_grads(model, feats, labels, mask, bptt=cfg.bptt, wrt=wrt,
                                     scale=1.0 / n_valid)
        loss /= n_valid
        if not np.isfinite(loss):
            raise TrainingError(f"loss became non-finite at step {step}",
                                last_finite_loss=losses[-1] if losses else None)
        losses.append(loss)
        try:
            adam_step(state, model.weights, grads)
        except TrainingError as exc:
            exc.last_finite_loss = loss
            raise
        if step % 100 == 0:
            log.debug("step %d loss %.4f", step, loss)
    return TrainResult(model, losses)


def train_scorer(data: Sequence[LabeledTrack], arch: Architecture, cfg: TrainConfig) -> TrainResult:
    """Train a scorer of any fusion mode.

    Single-stream networks are trained first, one per stream. ``average``
    combines them as they are; ``gating`` and ``fusion_layer`` then train only
    their head on top of the frozen streams. The returned loss curve is the
    concatenation of every stage's curve.
    """
    rng = np.random.default_rng(cfg.seed)
    if arch.fusion == "single":
        return train(ModelParams.initialize(arch, rng), data, cfg)
    singles, losses = [], []
    for s, (name, d) in enumerate(zip(arch.streams, arch.input_dims)):
        sub = Architecture((name,), (d,), arch.norm_dim, arch.hidden, arch.n_classes,
                           "single", arch.cell, arch.norm_activation)
        res = train(ModelParams.initialize(sub, rng), data,
                    replace(cfg, seed=cfg.seed + 1 + s))
        singles.append(res.model)
        losses += res.losses
    model = compose_streams(singles, arch.fusion, rng)
    if arch.fusion == "average":
        return TrainResult(model, losses)
    head = {"gate.w"} if arch.fusion == "gating" else {"fusion.W", "fusion.b"}
    res = train(model, data, replace(cfg, seed=cfg.seed + 1 + len(singles)), trainable=head,
                steps=cfg.head_steps if cfg.head_steps is not None else cfg.steps)
    return TrainResult(res.model, losses + res.losses)
