from __future__ import annotations

import numpy as np

from .network import ModelParams, _batched, _head, _normalise, _run_layer, loss_and_grads, nll_loss


def numerical_grads(model: ModelParams, features, labels, mask=None, eps: float = 1e-4):
    """Central finite differences of the summed NLL for every parameter entry.

    Only the stages downstream of a perturbed entry are recomputed; the rest
    comes from a cached pass, which gives the same numbers as a full forward.
    """
    arch = model.arch
    xs = _batched(features, arch)
    shape = xs[0].shape[:2]
    labels = np.asarray(labels, dtype=np.int64).reshape(shape)
    mask = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(shape)
    layer1 = []
    for s, x in enumerate(xs):
        layer1.append(_run_layer(model, s, "cell1", _normalise(model, s, x))[0])
    mems = [np.concatenate([o1, _run_layer(model, s, "cell2", o1)[0]], axis=-1) for s, o1 in enumerate(layer1)]

    def loss_for(key):
        stream, _, rest = key.partition(".")
        if stream in arch.streams and rest.split(".")[0] in ("norm", "cell1", "cell2"):
            s = arch.streams.index(stream)
            o1 = layer1[s]
            if not rest.startswith("cell2"):
                o1 = _run_layer(model, s, "cell1", _normalise(model, s, xs[s]))[0]
            trial = list(mems)
            trial[s] = np.concatenate([o1, _run_layer(model, s, "cell2", o1)[0]], axis=-1)
        else:
            trial = mems
        return nll_loss(_head(model, trial)["probs"], labels, mask)

    out = {}
    for k, theta in model.weights.items():
        g = np.empty_like(theta)
        flat, gflat = theta.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + eps
            up = loss_for(k)
            flat[j] = keep - eps
            down = loss_for(k)
            flat[j] = keep
            gflat[j] = (up - down) / (2 * eps)
        out[k] = g
    return out


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)``, elementwise."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradients(model: ModelParams, features, labels, mask=None, eps: float = 1e-4,
                    floor: float = 1e-8) -> float:
    """Largest relative error between backprop and central differences."""
    _, analytic = loss_and_grads(model, features, labels, mask)
    numeric = numerical_grads(model, features, labels, mask, eps)
    return max(float(relative_error(analytic[k], numeric[k], floor).max()) for k in analytic)
