"""Binary model checkpoints.

Layout, all integers little-endian uint32 unless stated::

    b"RLN1"
    version (=1)
    n_streams
    n_streams x (stream code, D_raw)      stream code: 0 appearance, 1 flow
    D_norm, H, C
    fusion code                           0 single, 1 average, 2 gating, 3 fusion_layer
    cell code                             0 gru, 1 lstm, 2 fc
    normalisation code                    0 tanh, 1 identity
    n_values (uint64)
    n_values little-endian float64

Parameter values follow :meth:`Architecture.param_shapes` order (streams in
declaration order, each as norm.W, norm.b, cell1.*, cell2.*, cls.W, cls.b;
then gate.w or fusion.W, fusion.b), each array flattened row-major.
"""
from __future__ import annotations

import struct

import numpy as np

from ..tracks import STREAMS
from .cells import CELLS
from .network import FUSION_MODES, NORM_ACTIVATIONS, Architecture, ModelParams

MAGIC = b"RLN1"
VERSION = 1
CELL_CODES = tuple(CELLS)


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: ModelParams) -> None:
    a = model.arch
    head = [VERSION, len(a.streams)]
    for name, d in zip(a.streams, a.input_dims):
        if name not in STREAMS:
            raise CheckpointError(f"stream {name!r} has no checkpoint code")
        head += [STREAMS.index(name), d]
    head += [a.norm_dim, a.hidden, a.n_classes, FUSION_MODES.index(a.fusion),
             CELL_CODES.index(a.cell), NORM_ACTIVATIONS.index(a.norm_activation)]
    values = np.concatenate([model.weights[k].ravel() for k in a.param_shapes()])
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(f"<{len(head)}I", *head))
        fh.write(struct.pack("<Q", values.size))
        fh.write(values.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = struct.unpack_from(fmt, blob, pos)
        pos += size
        return out

    version, n_streams = take("<2I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pairs = take(f"<{2 * n_streams}I")
    streams = tuple(STREAMS[c] for c in pairs[::2])
    dims = tuple(pairs[1::2])
    d_norm, hidden, n_classes, fusion, cell, norm = take("<6I")
    try:
        arch = Architecture(streams, dims, d_norm, hidden, n_classes, FUSION_MODES[fusion],
                            CELL_CODES[cell], NORM_ACTIVATIONS[norm])
    except IndexError as exc:
        raise CheckpointError(f"{path}: unknown mode code") from exc
    (n_values,) = take("<Q")
    if len(blob) - pos != 8 * n_values:
        raise CheckpointError(f"{path}: expected {n_values} parameters")
    values = np.frombuffer(blob, dtype="<f8", offset=pos).astype(np.float64)
    weights, off = {}, 0
    for k, shp in arch.param_shapes().items():
        size = int(np.prod(shp))
        weights[k] = values[off:off + size].reshape(shp).copy()
        off += size
    if off != n_values:
        raise CheckpointError(f"{path}: parameter count does not match the architecture")
    return ModelParams(arch, weights)
