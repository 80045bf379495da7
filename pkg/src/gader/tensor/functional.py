"""Neural-network operators on channels-last tensors.

Layout convention: activations are ``(N, *spatial, C)`` and convolution kernels
are ``(*kernel, C_in, C_out)``.
"""
from __future__ import annotations

import logging
import warnings

import numpy as np

from .core import Tensor, _pair, leaky_relu, log_softmax, matmul, max_reduce, relu

log = logging.getLogger(__name__)


class DegenerateBatchError(ValueError):
    """A triplet batch with fewer than two identities."""


def _tuple(v, n):
    if isinstance(v, (tuple, list)):
        if len(v) != n:
            raise ValueError(f"expected {n} values, got {v}")
        return tuple(int(x) for x in v)
    return (int(v),) * n


def _slices(offset, stride, out):
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out))


def conv(x, w, b=None, stride=1, padding=0):
    """N-d cross-correlation. ``x``: (N, *sp, Cin); ``w``: (*k, Cin, Cout)."""
    nd = w.ndim - 2
    if x.ndim != nd + 2:
        raise ValueError(f"conv{nd}d expects input of rank {nd + 2}, got input {x.shape} with kernel {w.shape}")
    if x.shape[-1] != w.shape[-2]:
        raise ValueError(f"channel mismatch: input {x.shape} vs kernel {w.shape}")
    stride = _tuple(stride, nd)
    pad = _tuple(padding, nd)
    if min(stride) < 1:
        raise ValueError("stride must be >= 1")
    ksize = w.shape[:nd]
    cin, cout = w.shape[-2], w.shape[-1]
    n = x.shape[0]
    spatial = x.shape[1:-1]
    out_sp = tuple((spatial[i] + 2 * pad[i] - ksize[i]) // stride[i] + 1 for i in range(nd))
    if min(out_sp) < 1:
        raise ValueError(f"kernel {w.shape} larger than padded input {x.shape}")
    offsets = list(np.ndindex(*ksize))
    xd, wd = x.data, w.data
    dtype = np.result_type(xd.dtype, wd.dtype)
    xp = np.pad(xd, [(0, 0)] + [(p, p) for p in pad] + [(0, 0)]) if any(pad) else xd

    def view(off):
        return xp[(slice(None),) + _slices(off, stride, out_sp)]

    # shift-and-accumulate: one (M, Cin) @ (Cin, Cout) product per kernel offset
    out = np.zeros((n,) + out_sp + (cout,), dtype=dtype)
    for off in offsets:
        out += view(off) @ wd[off]
    if b is not None:
        out += b.data

    def backward(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wd) if w.requires_grad else None
        gflat = g.reshape(-1, cout)
        for off in offsets:
            if gw is not None:
                gw[off] = view(off).reshape(-1, cin).T @ gflat
            if gx is not None:
                gx[(slice(None),) + _slices(off, stride, out_sp)] += g @ wd[off].T
        if gx is not None and any(pad):
            gx = gx[(slice(None),) + tuple(slice(p, p + s) for p, s in zip(pad, spatial)) + (slice(None),)]
        gb = g.reshape(-1, cout).sum(axis=0) if (b is not None and b.requires_grad) else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, backward, f"conv{nd}d")


def conv1d(x, w, b=None, stride=1, padding=0):
    if w.ndim != 3:
        raise ValueError(f"conv1d kernel must be (k, Cin, Cout), got {w.shape}")
    return conv(x, w, b, stride, padding)


def conv2d(x, w, b=None, stride=1, padding=0):
    if w.ndim != 4:
        raise ValueError(f"conv2d kernel must be (kh, kw, Cin, Cout), got {w.shape}")
    return conv(x, w, b, stride, padding)


def conv3d(x, w, b=None, stride=1, padding=0):
    if w.ndim != 5:
        raise ValueError(f"conv3d kernel must be (kt, kh, kw, Cin, Cout), got {w.shape}")
    return conv(x, w, b, stride, padding)


def pad_edge(x, pads):
    """Replicate-pad; ``pads`` is a (before, after) pair per axis."""
    xd = x.data
    index = [np.clip(np.arange(-p0, s + p1), 0, s - 1) for (p0, p1), s in zip(pads, xd.shape)]
    out = xd[np.ix_(*index)]

    def backward(g):
        for axis, (idx, s) in enumerate(zip(index, xd.shape)):
            if len(idx) == s:
                continue
            scatter = np.zeros((len(idx), s), dtype=g.dtype)
            scatter[np.arange(len(idx)), idx] = 1.0
            g = np.moveaxis(np.moveaxis(g, axis, -1) @ scatter, -1, axis)
        return (g,)

    return Tensor._make(out, (x,), backward, "pad_edge")


def _window_view(xd, axes, size):
    """Reshape so each pooling window sits on a trailing axis; crops remainders."""
    crop = [slice(None)] * xd.ndim
    for ax in axes:
        crop[ax] = slice(0, (xd.shape[ax] // size) * size)
    xc = xd[tuple(crop)]
    shape = []
    win_axes = []
    for ax, s in enumerate(xc.shape):
        if ax in axes:
            shape += [s // size, size]
            win_axes.append(len(shape) - 1)
        else:
            shape.append(s)
    v = xc.reshape(shape)
    keep = [i for i in range(len(shape)) if i not in win_axes]
    v = v.transpose(keep + win_axes)
    pooled_shape = v.shape[: len(keep)]
    return v.reshape(pooled_shape + (-1,)), tuple(crop), shape, keep + win_axes


def max_pool(x, axes, size=2):
    """Non-overlapping max pooling over ``axes`` (first index wins ties)."""
    axes = tuple(a % x.ndim for a in axes)
    xd = x.data
    v, crop, shape, perm = _window_view(xd, axes, size)
    idx = np.argmax(v, axis=-1)[..., None]
    out = np.take_along_axis(v, idx, axis=-1)[..., 0]

    def backward(g):
        gv = np.zeros(v.shape, dtype=g.dtype)
        np.put_along_axis(gv, idx, g[..., None], axis=-1)
        gv = gv.reshape([shape[i] for i in perm]).transpose(np.argsort(perm)).reshape(xd[crop].shape)
        gx = np.zeros_like(xd)
        gx[crop] = gv
        return (gx,)

    return Tensor._make(out, (x,), backward, "max_pool")


def avg_pool(x, axes, size=2):
    axes = tuple(a % x.ndim for a in axes)
    xd = x.data
    v, crop, shape, perm = _window_view(xd, axes, size)
    k = v.shape[-1]
    out = v.mean(axis=-1)

    def backward(g):
        gv = np.broadcast_to(g[..., None] / k, v.shape)
        gv = gv.reshape([shape[i] for i in perm]).transpose(np.argsort(perm)).reshape(xd[crop].shape)
        gx = np.zeros_like(xd)
        gx[crop] = gv
        return (gx,)

    return Tensor._make(out, (x,), backward, "avg_pool")


def max_pool_temporal(x, axis=1):
    """Max over the whole temporal axis: a window-length invariant summary."""
    return max_reduce(x, axis)


def linear(x, w, b=None):
    y = matmul(x, w)
    return y + b if b is not None else y


def mlp_forward(x, layers, slope=0.01):
    """Affine chain with leaky-relu between layers; ``layers`` is [(w, b), ...]."""
    for i, (w, b) in enumerate(layers):
        x = linear(x, w, b)
        if i < len(layers) - 1:
            x = leaky_relu(x, slope)
    return x


def cross_entropy(logits, labels):
    """Mean of ``-log softmax(logits)[label]`` over the batch."""
    labels = np.atleast_1d(np.asarray(labels))
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be integers in [0, {k}), got {labels}")
    lsm = log_softmax(logits, axis=1)
    picked = lsm[np.arange(n), labels]
    return -(picked.sum() * (1.0 / n))


def pairwise_distances(e):
    """Euclidean distance matrix of the rows of ``e``; subgradient 0 at coincident rows."""
    ed = e.data
    diff = ed[:, None, :] - ed[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=-1))
    safe = np.where(d > 0, d, 1.0)

    def backward(g):
        coef = np.where(d > 0, g / safe, 0.0)
        coef = coef + coef.T
        return ((coef[:, :, None] * diff).sum(axis=1),)

    return Tensor._make(d, (e,), backward, "pairwise_distances")


def triplet_masks(labels):
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(len(labels), dtype=bool)
    pos = same & ~eye
    neg = ~same
    return pos[:, :, None] & neg[:, None, :]


def triplet_loss_batch_all(emb, labels, margin=0.2, return_count=False):
    """Mean hinge ``[d(a,p) - d(a,n) + m]_+`` over every valid triplet in the batch.

    Raises DegenerateBatchError for single-identity batches. A batch with no
    valid triplet yields 0 and a RuntimeWarning.
    """
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise DegenerateBatchError("triplet batch needs at least two identities")
    valid = triplet_masks(labels)
    count = int(valid.sum())
    if count == 0:
        warnings.warn("triplet batch has no valid (anchor, positive, negative) triple", RuntimeWarning)
        zero = Tensor._make(np.zeros((), dtype=emb.dtype), (emb,), lambda g: (np.zeros_like(emb.data),))
        return (zero, 0) if return_count else zero
    d = pairwise_distances(emb)
    n = d.shape[0]
    dap = d.reshape(n, n, 1)
    dan = d.reshape(n, 1, n)
    hinge = relu(dap - dan + margin)
    loss = (hinge * valid.astype(emb.dtype)).sum() * (1.0 / count)
    return (loss, count) if return_count else loss


def mse(a, b):
    a, b = _pair(a, b)
    diff = a - b
    return (diff * diff).mean()


def cosine_distance(a, b, eps=1e-12):
    """Mean of ``1 - cos(a_i, b_i)`` over rows after flattening all but the batch axis."""
    a, b = _pair(a, b)
    n = a.shape[0]
    af = a.reshape(n, -1)
    bf = b.reshape(n, -1)
    dot = (af * bf).sum(axis=1)
    na = ((af * af).sum(axis=1) + eps) ** 0.5
    nb = ((bf * bf).sum(axis=1) + eps) ** 0.5
    return (1.0 - dot / (na * nb)).mean()
