"""Two-stream stacked recurrent scorer: forward pass, NLL loss and BPTT.

Each stream maps raw per-frame features through an affine normalisation
layer, then through two stacked cells; the two cells' outputs are
concatenated into a ``2H`` memory vector per frame. The fusion mode decides
how stream memories become class probabilities:

``single``
    one stream, ``softmax(W m + b)``.
``average``
    mean of the per-stream softmax outputs.
``gating``
    ``softmax(sum_s w[:, s] * (W_s m_s + b_s))`` with per-class stream weights.
``fusion_layer``
    ``softmax(W [m_1, m_2] + b)`` over the concatenated memories.

Column 0 of every probability row is background.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.special import log_softmax, softmax

from .cells import CELLS

FUSION_MODES = ("single", "average", "gating", "fusion_layer")
NORM_ACTIVATIONS = ("tanh", "identity")
LOG_PROB_FLOOR = -50.0


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    streams: tuple[str, ...]
    input_dims: tuple[int, ...]
    norm_dim: int
    hidden: int
    n_classes: int
    fusion: str = "single"
    cell: str = "gru"
    norm_activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "streams", tuple(self.streams))
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if len(self.streams) != len(self.input_dims) or not self.streams:
            raise ModelError("need one input dimension per stream")
        if len(set(self.streams)) != len(self.streams):
            raise ModelError(f"duplicate stream names {self.streams}")
        if self.fusion not in FUSION_MODES:
            raise ModelError(f"unknown fusion mode {self.fusion!r}")
        if self.cell not in CELLS:
            raise ModelError(f"unknown cell type {self.cell!r}")
        if self.norm_activation not in NORM_ACTIVATIONS:
            raise ModelError(f"unknown normalisation activation {self.norm_activation!r}")
        if (self.fusion == "single") != (len(self.streams) == 1):
            raise ModelError(f"fusion {self.fusion!r} does not fit {len(self.streams)} stream(s)")
        if min(self.norm_dim, self.hidden, self.n_classes, *self.input_dims) < 1:
            raise ModelError("all dimensions must be positive")

    @property
    def n_outputs(self) -> int:
        return self.n_classes + 1

    def stream_shapes(self, s: int) -> dict[str, tuple]:
        name, cell = self.streams[s], CELLS[self.cell]
        shapes = {f"{name}.norm.W": (self.norm_dim, self.input_dims[s]),
                  f"{name}.norm.b": (self.norm_dim,)}
        for layer, d in (("cell1", self.norm_dim), ("cell2", self.hidden)):
            for k, shp in cell.shapes(d, self.hidden).items():
                shapes[f"{name}.{layer}.{k}"] = shp
        if self.fusion != "fusion_layer":
            shapes[f"{name}.cls.W"] = (self.n_outputs, 2 * self.hidden)
            shapes[f"{name}.cls.b"] = (self.n_outputs,)
        return shapes

    def param_shapes(self) -> dict[str, tuple]:
        """Canonical parameter names and shapes, in serialisation order."""
        shapes = {}
        for s in range(len(self.streams)):
            shapes.update(self.stream_shapes(s))
        if self.fusion == "gating":
            shapes["gate.w"] = (self.n_outputs, len(self.streams))
        elif self.fusion == "fusion_layer":
            shapes["fusion.W"] = (self.n_outputs, 2 * self.hidden * len(self.streams))
            shapes["fusion.b"] = (self.n_outputs,)
        return shapes


def _is_bias(name):
    return name.endswith(".b") or name.endswith(".b1")


@dataclass
class ModelParams:
    arch: Architecture
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.arch.param_shapes()
        if set(self.weights) != set(shapes):
            missing = set(shapes) ^ set(self.weights)
            raise ModelError(f"parameter set mismatch: {sorted(missing)}")
        self.weights = {k: np.asarray(self.weights[k], dtype=np.float64) for k in shapes}
        for k, shp in shapes.items():
            if self.weights[k].shape != shp:
                raise ModelError(f"{k}: shape {self.weights[k].shape}, expected {shp}")

    @classmethod
    def initialize(cls, arch: Architecture, rng=None) -> "ModelParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

        Gating weights start at 1 so the gated model begins as the plain
        sum of the per-stream logits.
        """
        rng = np.random.default_rng(rng)
        weights = {}
        for name, shp in arch.param_shapes().items():
            if name == "gate.w":
                weights[name] = np.ones(shp)
            elif _is_bias(name):
                weights[name] = np.zeros(shp)
            else:
                bound = 1.0 / np.sqrt(shp[-1])
                weights[name] = rng.uniform(-bound, bound, size=shp)
        return cls(arch, weights)

    @classmethod
    def zeros(cls, arch: Architecture) -> "ModelParams":
        return cls(arch, {k: np.zeros(s) for k, s in arch.param_shapes().items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.weights.items()})

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.weights.values())

    def cell_params(self, stream: str, layer: str) -> dict[str, np.ndarray]:
        prefix = f"{stream}.{layer}."
        return {k[len(prefix):]: v for k, v in self.weights.items() if k.startswith(prefix)}


def _batched(features: Mapping[str, np.ndarray], arch: Architecture):
    out = []
    for name, d in zip(arch.streams, arch.input_dims):
        if name not in features:
            raise ModelError(f"fusion mode {arch.fusion!r} needs stream {name!r}")
        x = np.asarray(features[name], dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[-1] != d:
            raise ModelError(f"stream {name!r}: features of shape {x.shape}, expected (..., T, {d})")
        out.append(x)
    if len({x.shape[:2] for x in out}) != 1:
        raise ModelError("streams disagree on batch size or track length")
    return out


def _normalise(model: ModelParams, s: int, x: np.ndarray) -> np.ndarray:
    name, w = model.arch.streams[s], model.weights
    u = x @ w[f"{name}.norm.W"].T + w[f"{name}.norm.b"]
    return np.tanh(u) if model.arch.norm_activation == "tanh" else u


def _run_layer(model: ModelParams, s: int, layer: str, inputs: np.ndarray):
    """One cell unrolled over ``(B, T, D)`` inputs from a zero state."""
    cell, hdim = CELLS[model.arch.cell], model.arch.hidden
    p = model.cell_params(model.arch.streams[s], layer)
    batch, steps = inputs.shape[:2]
    state = cell.zero_state(batch, hdim)
    out = np.empty((batch, steps, hdim))
    caches = []
    for t in range(steps):
        state, out[:, t], k = cell.step(p, inputs[:, t], state)
        caches.append(k)
    return out, caches


def _stream_forward(model: ModelParams, s: int, x: np.ndarray):
    u = _normalise(model, s, x)
    o1, c1 = _run_layer(model, s, "cell1", u)
    o2, c2 = _run_layer(model, s, "cell2", o1)
    return np.concatenate([o1, o2], axis=-1), {"x": x, "u": u, "c1": c1, "c2": c2}


def _head(model: ModelParams, mems: list[np.ndarray]) -> dict:
    """Fusion and softmax on top of the per-stream memories."""
    arch, w = model.arch, model.weights
    cache = {"mem": mems}
    if arch.fusion == "fusion_layer":
        logits = np.concatenate(mems, axis=-1) @ w["fusion.W"].T + w["fusion.b"]
    else:
        stream_logits = [m @ w[f"{n}.cls.W"].T + w[f"{n}.cls.b"] for n, m in zip(arch.streams, mems)]
        cache["stream_logits"] = stream_logits
        if arch.fusion == "single":
            logits = stream_logits[0]
        elif arch.fusion == "gating":
            logits = sum(w["gate.w"][:, s] * lg for s, lg in enumerate(stream_logits))
        else:
            logits = None
    if logits is None:
        q = [softmax(lg, axis=-1) for lg in cache["stream_logits"]]
        probs = np.mean(q, axis=0)
        cache["stream_probs"] = q
        with np.errstate(divide="ignore"):
            cache["log_probs"] = np.log(probs)
    else:
        cache["log_probs"] = log_softmax(logits, axis=-1)
        probs = np.exp(cache["log_probs"])
    cache["probs"] = probs
    return cache


def forward(model: ModelParams, features: Mapping[str, np.ndarray]):
    """Score every frame of one track ``(T, D)`` or a batch ``(B, T, D)``.

    Returns ``(probs, cache)``; ``probs`` has the batch layout of the input
    with a trailing ``C + 1`` axis.
    """
    arch = model.arch
    xs = _batched(features, arch)
    squeeze = np.ndim(features[arch.streams[0]]) == 2
    outs = [_stream_forward(model, s, x) for s, x in enumerate(xs)]
    cache = _head(model, [m for m, _ in outs])
    cache["streams"] = [c for _, c in outs]
    probs = cache["probs"]
    return (probs[0] if squeeze else probs), cache


def _target_log_probs(log_probs, labels):
    return np.take_along_axis(log_probs, labels[..., None], axis=-1)[..., 0]


def nll_loss(probs, labels, mask=None) -> float:
    """Summed negative log-likelihood of the labels, log-probs floored at -50."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape[:-1] != labels.shape:
        raise ModelError(f"labels shape {labels.shape} does not match scores {probs.shape[:-1]}")
    with np.errstate(divide="ignore"):
        lp = np.maximum(_target_log_probs(np.log(probs), labels), LOG_PROB_FLOOR)
    if mask is not None:
        lp = lp * mask
    return float(-lp.sum())


def _cache_loss(cache, labels, mask):
    lp = np.maximum(_target_log_probs(cache["log_probs"], labels), LOG_PROB_FLOOR)
    return float(-(lp * mask).sum())


def _stream_backward(model: ModelParams, s: int, cache, dmem, bptt, grads):
    arch = model.arch
    name, cell, hdim = arch.streams[s], CELLS[arch.cell], arch.hidden
    p1, p2 = model.cell_params(name, "cell1"), model.cell_params(name, "cell2")
    batch, steps = dmem.shape[:2]
    zero = cell.zero_state(batch, hdim)
    carry1, carry2 = zero, zero
    du = np.empty(cache["u"].shape)
    dp1, dp2 = [None] * steps, [None] * steps
    for t in range(steps - 1, -1, -1):
        dx2, carry2, dp2[t] = cell.step_backward(p2, cache["c2"][t], dmem[:, t, hdim:], carry2)
        du[:, t], carry1, dp1[t] = cell.step_backward(p1, cache["c1"][t], dmem[:, t, :hdim] + dx2, carry1)
        if bptt and t % bptt == 0:
            carry1, carry2 = zero, zero
    for layer, caches, dps in (("cell1", cache["c1"], dp1), ("cell2", cache["c2"], dp2)):
        for k, g in cell.param_grads(caches, dps).items():
            grads[f"{name}.{layer}.{k}"] = g
    if arch.norm_activation == "tanh":
        du = du * (1.0 - cache["u"] ** 2)
    x = cache["x"]
    grads[f"{name}.norm.W"] = np.einsum("btn,btd->nd", du, x)
    grads[f"{name}.norm.b"] = du.sum(axis=(0, 1))


def backward(model: ModelParams, cache, labels, mask=None, bptt: int | None = None,
             wrt=None, scale: float = 1.0):
    """Gradients of ``scale * nll_loss`` with respect to every parameter.

    ``bptt`` cuts gradient flow through the hidden state at frames that are
    multiples of ``bptt`` (the forward state is carried across unchanged).
    ``wrt`` restricts the computation to a subset of parameter names; stream
    recurrences whose parameters are all excluded are skipped.
    """
    arch, w = model.arch, model.weights
    probs = cache["probs"]
    labels = np.asarray(labels, dtype=np.int64).reshape(probs.shape[:-1])
    mask = np.ones(labels.shape) if mask is None else np.asarray(mask, dtype=np.float64).reshape(labels.shape)
    # frames whose target log-prob sits on the floor contribute a constant
    live = mask * (_target_log_probs(cache["log_probs"], labels) > LOG_PROB_FLOOR) * scale
    onehot = np.zeros(probs.shape)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    grads = {}
    mems = cache["mem"]
    if arch.fusion == "average":
        n = len(mems)
        dmems = []
        p_y = _target_log_probs(probs, labels)
        for q in cache["stream_probs"]:
            q_y = _target_log_probs(q, labels)
            coef = -(live / n) * q_y / np.where(p_y > 0, p_y, 1.0)
            dlg = coef[..., None] * (onehot - q)
            dmems.append(dlg)
    else:
        dlogits = (probs - onehot) * live[..., None]
        if arch.fusion == "fusion_layer":
            cat = np.concatenate(mems, axis=-1)
            grads["fusion.W"] = np.einsum("btc,btk->ck", dlogits, cat)
            grads["fusion.b"] = dlogits.sum(axis=(0, 1))
            dcat = dlogits @ w["fusion.W"]
            width = 2 * arch.hidden
            dmems = [dcat[..., s * width:(s + 1) * width] for s in range(len(mems))]
        elif arch.fusion == "gating":
            gate = w["gate.w"]
            grads["gate.w"] = np.stack(
                [np.einsum("btc,btc->c", dlogits, lg) for lg in cache["stream_logits"]], axis=1)
            dmems = [dlogits * gate[:, s] for s in range(len(mems))]
        else:
            dmems = [dlogits]
    if arch.fusion != "fusion_layer":
        # dmems currently hold per-stream logit gradients
        dlgs, dmems = dmems, []
        for name, m, dlg in zip(arch.streams, mems, dlgs):
            grads[f"{name}.cls.W"] = np.einsum("btc,btk->ck", dlg, m)
            grads[f"{name}.cls.b"] = dlg.sum(axis=(0, 1))
            dmems.append(dlg @ w[f"{name}.cls.W"])
    for s, name in enumerate(arch.streams):
        if wrt is not None and not any(k in wrt for k in arch.stream_shapes(s) if ".cls." not in k):
            continue
        _stream_backward(model, s, cache["streams"][s], dmems[s], bptt, grads)
    shapes = arch.param_shapes()
    return {k: grads.get(k, np.zeros(shp)) for k, shp in shapes.items()
            if wrt is None or k in wrt}


def loss_and_grads(model: ModelParams, features, labels, mask=None, bptt=None, wrt=None, scale=1.0):
    probs, cache = forward(model, features)
    labels = np.asarray(labels, dtype=np.int64).reshape(cache["probs"].shape[:-1])
    mask = np.ones(labels.shape) if mask is None else np.asarray(mask, dtype=np.float64).reshape(labels.shape)
    loss = _cache_loss(cache, labels, mask)
    return loss, backward(model, cache, labels, mask, bptt=bptt, wrt=wrt, scale=scale)


def fc_baseline_forward(model: ModelParams, features):
    """Forward pass of a model whose cells are the stateless FC replacement."""
    if model.arch.cell != "fc":
        raise ModelError("fc_baseline_forward needs an architecture with cell='fc'")
    return forward(model, features)


def single_stream_view(model: ModelParams, stream: str) -> ModelParams:
    """Extract one stream (with its own classifier) as a ``single`` model."""
    arch = model.arch
    if arch.fusion == "fusion_layer":
        raise ModelError("fusion_layer models carry no per-stream classifier")
    s = arch.streams.index(stream)
    sub = replace(arch, streams=(stream,), input_dims=(arch.input_dims[s],), fusion="single")
    return ModelParams(sub, {k: v.copy() for k, v in model.weights.items() if k in sub.param_shapes()})


def compose_streams(singles: list[ModelParams], fusion: str, rng=None) -> ModelParams:
    """Build a multi-stream model from independently trained single-stream ones.

    The stream weights are copied verbatim. A fresh ``fusion_layer`` head is
    initialised to the concatenation of the single-stream classifiers (biases
    summed), i.e. it starts out equal to a gating model with unit weights.
    """
    base = singles[0].arch
    for m in singles:
        if m.arch.fusion != "single":
            raise ModelError("compose_streams expects single-stream models")
        if (m.arch.cell, m.arch.hidden, m.arch.norm_dim, m.arch.n_classes, m.arch.norm_activation) != \
                (base.cell, base.hidden, base.norm_dim, base.n_classes, base.norm_activation):
            raise ModelError("single-stream models disagree on their architecture")
    arch = replace(base, streams=tuple(m.arch.streams[0] for m in singles),
                   input_dims=tuple(m.arch.input_dims[0] for m in singles), fusion=fusion)
    fresh = ModelParams.initialize(arch, rng)
    weights = dict(fresh.weights)
    for m in singles:
        for k, v in m.weights.items():
            if k in weights:
                weights[k] = v.copy()
    if fusion == "fusion_layer":
        weights["fusion.W"] = np.concatenate([m.weights[f"{m.arch.streams[0]}.cls.W"] for m in singles], axis=1)
        weights["fusion.b"] = np.sum([m.weights[f"{m.arch.streams[0]}.cls.b"] for m in singles], axis=0)
    return ModelParams(arch, weights)
