"""Named parameters, SGD with momentum, and the ``GCKPT1`` checkpoint format.

Checkpoint layout (little-endian)::

    b"GCKPT1"  uint32 count
    repeated count times:
        uint32 name_len, name bytes (utf-8), uint32 rank, int64 extents[rank],
        float32 payload (row-major)
"""
from __future__ import annotations

import io
import struct
from collections import OrderedDict

import numpy as np

from .core import Tensor

MAGIC = b"GCKPT1"


class CheckpointError(ValueError):
    pass


class ParameterStore:
    """Ordered mapping of unique names to trainable tensors plus optimizer state."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.velocity: dict[str, np.ndarray] = {}

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    @classmethod
    def from_state(cls, state, dtype=np.float32):
        store = cls(dtype)
        for k, v in state.items():
            store.add(k, v)
        return store

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_dict(self):
        return OrderedDict((k, t.data.copy()) for k, t in self._params.items())

    def load_state_dict(self, state, strict=True, required=None):
        """Copy arrays into existing parameters.

        ``required`` restricts the names that must be present (others may be
        missing from ``state``); extra names in ``state`` are always an error
        under ``strict``.
        """
        need = set(self._params) if required is None else set(required)
        missing = sorted(need - set(state))
        extra = sorted(set(state) - set(self._params))
        if strict and (missing or extra):
            raise CheckpointError(f"incompatible checkpoint: missing={missing} extra={extra}")
        for k, v in state.items():
            if k not in self._params:
                continue
            t = self._params[k]
            if t.shape != tuple(v.shape):
                raise CheckpointError(f"shape mismatch for {k!r}: {t.shape} vs {tuple(v.shape)}")
            t.data = np.array(v, dtype=self.dtype)

    def astype(self, dtype):
        """Cast every parameter in place (for 64-bit gradient checks)."""
        self.dtype = np.dtype(dtype)
        for t in self._params.values():
            t.data = t.data.astype(self.dtype)
        self.velocity = {}
        return self


def sgd_momentum_step(store, lr, momentum=0.9, weight_decay=0.0, names=None):
    """``v <- momentum * v + g (+ wd * w)``; ``w <- w - lr * v``. Missing grads count as zero."""
    for name, t in store.items():
        if names is not None and name not in names:
            continue
        if t.grad is None:
            continue
        g = t.grad
        if weight_decay:
            g = g + weight_decay * t.data
        v = store.velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        store.velocity[name] = v
        t.data = (t.data - lr * v).astype(t.data.dtype, copy=False)


def step_lr(base_lr, step, milestones, gamma=0.1):
    return base_lr * gamma ** sum(step >= m for m in milestones)


def dumps_checkpoint(state):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads_checkpoint(blob):
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic at byte 0: {blob[:len(MAGIC)]!r}")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint at byte {pos}: need {n} bytes, have {len(blob) - pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    state = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}q", take(8 * rank))
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        if name in state:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        state[name] = arr.astype(np.float32)
    if pos != len(blob):
        raise CheckpointError(f"trailing bytes after byte {pos}")
    return state


def save_checkpoint(store_or_state, path):
    state = store_or_state.state_dict() if isinstance(store_or_state, ParameterStore) else store_or_state
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(state))


def load_checkpoint(path, store=None, required=None):
    with open(path, "rb") as fh:
        state = loads_checkpoint(fh.read())
    if store is not None:
        store.load_state_dict(state, required=required)
    return state
