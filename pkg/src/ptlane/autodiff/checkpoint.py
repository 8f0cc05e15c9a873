"""Versioned binary checkpoints.

Layout (little endian)::

    magic  b"PTLCKPT\\0"           8 bytes
    version                        u32
    n_params                       u32
    per parameter:
        name length, name (utf-8)  u32, bytes
        ndim, shape                u32, ndim x u64
        values                     prod(shape) x f64, C order
    has_optimizer                  u8
    if has_optimizer:
        lr, beta1, beta2, eps, weight_decay   5 x f64
        step                                  u64
        per parameter (same order): m block, v block   (shape-prefixed as above)
    metadata length, metadata (utf-8 JSON)   u32, bytes
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

from ..errors import CheckpointError
from .optim import AdamState

MAGIC = b"PTLCKPT\0"
VERSION = 1


def _write_block(buf, arr):
    arr = np.asarray(arr, dtype="<f8", order="C")
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes())


def _read_exact(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_block(buf):
    (ndim,) = struct.unpack("<I", _read_exact(buf, 4))
    shape = struct.unpack(f"<{ndim}Q", _read_exact(buf, 8 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(_read_exact(buf, 8 * count), dtype="<f8").reshape(shape)
    return arr.astype(np.float64)


def dumps(params: dict, state: AdamState | None = None, metadata: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(params)))
    names = list(params)
    for name in names:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        p = params[name]
        _write_block(buf, p if isinstance(p, np.ndarray) else p.data)
    buf.write(struct.pack("<B", state is not None))
    if state is not None:
        buf.write(struct.pack("<5d", state.lr, state.beta1, state.beta2, state.eps,
                              state.weight_decay))
        buf.write(struct.pack("<Q", state.step))
        for name in names:
            shape = np.shape(params[name] if isinstance(params[name], np.ndarray)
                             else params[name].data)
            _write_block(buf, state.m.get(name, np.zeros(shape)))
            _write_block(buf, state.v.get(name, np.zeros(shape)))
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    return buf.getvalue()


def loads(data: bytes):
    """Return ``(params, state_or_None, metadata)``."""
    buf = io.BytesIO(data)
    if _read_exact(buf, 8) != MAGIC:
        raise CheckpointError("not a ptlane checkpoint")
    version, count = struct.unpack("<II", _read_exact(buf, 8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", _read_exact(buf, 4))
        name = _read_exact(buf, n).decode("utf-8")
        params[name] = _read_block(buf)
    (has_state,) = struct.unpack("<B", _read_exact(buf, 1))
    state = None
    if has_state:
        lr, b1, b2, eps, wd = struct.unpack("<5d", _read_exact(buf, 40))
        (step,) = struct.unpack("<Q", _read_exact(buf, 8))
        state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd, step=step)
        for name in params:
            state.m[name] = _read_block(buf)
            state.v[name] = _read_block(buf)
    (n,) = struct.unpack("<I", _read_exact(buf, 4))
    metadata = json.loads(_read_exact(buf, n).decode("utf-8"))
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    return params, state, metadata


def save(path, params, state=None, metadata=None):
    with open(path, "wb") as fh:
        fh.write(dumps(params, state, metadata))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
