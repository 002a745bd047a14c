"""Recurrent cells (GRU, LSTM) and the stateless two-layer FC replacement.

Gate parameters are stacked along a leading gate axis: ``W`` is ``(G, H, D)``,
``U`` is ``(G, H, H)`` and ``b`` is ``(G, H)``. Gate order is ``z, r, h`` for
the GRU and ``f, i, o, c`` for the LSTM.

Each cell exposes a batched ``step`` that returns the new state and a cache,
a ``step_backward`` that maps output/state gradients to input/state/
pre-activation gradients, and ``param_grads`` which reduces the per-step
pre-activation gradients of a whole sequence into parameter gradients.
States are tuples: ``(h,)`` for the GRU, ``(h, c)`` for the LSTM and ``()``
for the FC cell.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.special import expit

GRU_GATES = ("z", "r", "h")
LSTM_GATES = ("f", "i", "o", "c")


class ShapeError(ValueError):
    pass


class CellParams(NamedTuple):
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray


def _check(p: CellParams, x, h, n_gates):
    if p.W.ndim != 3 or p.W.shape[0] != n_gates:
        raise ShapeError(f"W must be ({n_gates}, H, D), got {p.W.shape}")
    g, hdim, d = p.W.shape
    if p.U.shape != (g, hdim, hdim) or p.b.shape != (g, hdim):
        raise ShapeError(f"inconsistent cell shapes W{p.W.shape} U{p.U.shape} b{p.b.shape}")
    if np.shape(x)[-1] != d:
        raise ShapeError(f"input has size {np.shape(x)[-1]}, cell expects {d}")
    if np.shape(h)[-1] != hdim:
        raise ShapeError(f"state has size {np.shape(h)[-1]}, cell expects {hdim}")


def _affine(x, W):
    # x: (B, D), W: (G, H, D) -> (B, G, H)
    g, h, d = W.shape
    return (x @ W.reshape(g * h, d).T).reshape(-1, g, h)


class GRUCell:
    name = "gru"
    gates = GRU_GATES

    @staticmethod
    def shapes(d, h):
        return {"W": (3, h, d), "U": (3, h, h), "b": (3, h)}

    @staticmethod
    def zero_state(batch, h):
        return (np.zeros((batch, h)),)

    @staticmethod
    def step(p: dict, x, state):
        (h_prev,) = state
        W, U, b = p["W"], p["U"], p["b"]
        pre = _affine(x, W) + b
        zr = expit(pre[:, :2] + _affine(h_prev, U[:2]))
        z, r = zr[:, 0], zr[:, 1]
        rh = r * h_prev
        g = np.tanh(pre[:, 2] + rh @ U[2].T)
        h = z * h_prev + (1.0 - z) * g
        return (h,), h, (x, h_prev, z, r, rh, g)

    @staticmethod
    def step_backward(p: dict, cache, d_out, d_state):
        x, h_prev, z, r, rh, g = cache
        U, W = p["U"], p["W"]
        dh = d_out + d_state[0] if d_state else d_out
        d_hat = dh * (1.0 - z) * (1.0 - g * g)
        d_rh = d_hat @ U[2]
        dz = dh * (h_prev - g) * z * (1.0 - z)
        dr = d_rh * h_prev * r * (1.0 - r)
        dpre = np.stack([dz, dr, d_hat], axis=1)
        dh_prev = dh * z + d_rh * r + dz @ U[0] + dr @ U[1]
        g_, hd, d = W.shape
        dx = dpre.reshape(-1, g_ * hd) @ W.reshape(g_ * hd, d)
        return dx, (dh_prev,), dpre

    @staticmethod
    def param_grads(caches, dpres):
        X = np.stack([c[0] for c in caches])
        Hp = np.stack([c[1] for c in caches])
        RH = np.stack([c[4] for c in caches])
        DP = np.stack(dpres)
        dW = np.einsum("tbgh,tbd->ghd", DP, X)
        dU = np.empty((3,) + dW.shape[1:2] * 2)
        dU[:2] = np.einsum("tbgh,tbk->ghk", DP[:, :, :2], Hp)
        dU[2] = np.einsum("tbh,tbk->hk", DP[:, :, 2], RH)
        return {"W": dW, "U": dU, "b": DP.sum(axis=(0, 1))}


class LSTMCell:
    name = "lstm"
    gates = LSTM_GATES

    @staticmethod
    def shapes(d, h):
        return {"W": (4, h, d), "U": (4, h, h), "b": (4, h)}

    @staticmethod
    def zero_state(batch, h):
        return (np.zeros((batch, h)), np.zeros((batch, h)))

    @staticmethod
    def step(p: dict, x, state):
        h_prev, c_prev = state
        pre = _affine(x, p["W"]) + _affine(h_prev, p["U"]) + p["b"]
        fio = expit(pre[:, :3])
        f, i, o = fio[:, 0], fio[:, 1], fio[:, 2]
        g = np.tanh(pre[:, 3])
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        return (h, c), h, (x, h_prev, c_prev, f, i, o, g, tc)

    @staticmethod
    def step_backward(p: dict, cache, d_out, d_state):
        x, h_prev, c_prev, f, i, o, g, tc = cache
        dh = d_out + d_state[0]
        dc = d_state[1] + dh * o * (1.0 - tc * tc)
        df = dc * c_prev * f * (1.0 - f)
        di = dc * g * i * (1.0 - i)
        do = dh * tc * o * (1.0 - o)
        dg = dc * i * (1.0 - g * g)
        dpre = np.stack([df, di, do, dg], axis=1)
        g_, hd, d = p["W"].shape
        flat = dpre.reshape(-1, g_ * hd)
        dx = flat @ p["W"].reshape(g_ * hd, d)
        dh_prev = flat @ p["U"].reshape(g_ * hd, hd)
        return dx, (dh_prev, dc * f), dpre

    @staticmethod
    def param_grads(caches, dpres):
        X = np.stack([c[0] for c in caches])
        Hp = np.stack([c[1] for c in caches])
        DP = np.stack(dpres)
        return {"W": np.einsum("tbgh,tbd->ghd", DP, X),
                "U": np.einsum("tbgh,tbk->ghk", DP, Hp),
                "b": DP.sum(axis=(0, 1))}


class FCCell:
    """Two tanh layers ``D -> 3H -> H`` with no temporal state.

    The hidden layer carries a bias and the output layer does not, which
    makes the parameter count ``3 * (H*D + H*H + H)``, identical to a GRU
    cell of the same input and hidden size.
    """

    name = "fc"

    @staticmethod
    def shapes(d, h):
        return {"W1": (3 * h, d), "b1": (3 * h,), "W2": (h, 3 * h)}

    @staticmethod
    def zero_state(batch, h):
        return ()

    @staticmethod
    def step(p: dict, x, state):
        q = np.tanh(x @ p["W1"].T + p["b1"])
        y = np.tanh(q @ p["W2"].T)
        return (), y, (x, q, y)

    @staticmethod
    def step_backward(p: dict, cache, d_out, d_state):
        x, q, y = cache
        da2 = d_out * (1.0 - y * y)
        da1 = (da2 @ p["W2"]) * (1.0 - q * q)
        return da1 @ p["W1"], (), (da1, da2)

    @staticmethod
    def param_grads(caches, dpres):
        X = np.stack([c[0] for c in caches])
        Q = np.stack([c[1] for c in caches])
        DA1 = np.stack([d[0] for d in dpres])
        DA2 = np.stack([d[1] for d in dpres])
        return {"W1": np.einsum("tbk,tbd->kd", DA1, X),
                "b1": DA1.sum(axis=(0, 1)),
                "W2": np.einsum("tbh,tbk->hk", DA2, Q)}


CELLS = {c.name: c for c in (GRUCell, LSTMCell, FCCell)}


def cell_param_count(kind: str, d: int, h: int) -> int:
    return sum(int(np.prod(s)) for s in CELLS[kind].shapes(d, h).values())


def _as_batch(v):
    v = np.asarray(v, dtype=np.float64)
    return v[None, :] if v.ndim == 1 else v


def gru_step(p: CellParams, x_t, h_prev) -> np.ndarray:
    """One GRU update; accepts a single vector or a ``(B, ·)`` batch."""
    _check(p, x_t, h_prev, 3)
    single = np.ndim(x_t) == 1
    (h,), _, _ = GRUCell.step(p._asdict(), _as_batch(x_t), (_as_batch(h_prev),))
    return h[0] if single else h


def lstm_step(p: CellParams, x_t, h_prev, c_prev) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM update returning ``(h_t, c_t)``."""
    _check(p, x_t, h_prev, 4)
    if np.shape(c_prev) != np.shape(h_prev):
        raise ShapeError("h_prev and c_prev must have the same shape")
    single = np.ndim(x_t) == 1
    (h, c), _, _ = LSTMCell.step(p._asdict(), _as_batch(x_t), (_as_batch(h_prev), _as_batch(c_prev)))
    return (h[0], c[0]) if single else (h, c)
