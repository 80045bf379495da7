"""Central finite-difference checks for the reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from .core import Tensor


def _scalarize(out, rng):
    """Reduce a tensor output to a scalar with a fixed random projection."""
    if out.data.ndim == 0:
        return out, None
    proj = rng.normal(size=out.shape)
    return (out * Tensor(proj)).sum(), proj


def numeric_grad(fn, arrays, index, coords, eps=1e-6, proj=None):
    """d fn / d arrays[index] at the given flat coordinates, by central differences."""
    base = arrays[index]
    out = np.zeros(len(coords))
    for n, c in enumerate(coords):
        vals = []
        for sign in (1.0, -1.0):
            pert = base.copy()
            pert.reshape(-1)[c] += sign * eps
            args = list(arrays)
            args[index] = pert
            y = fn(*[Tensor(a) for a in args]).data
            vals.append(float(y) if proj is None else float((y * proj).sum()))
        out[n] = (vals[0] - vals[1]) / (2 * eps)
    return out


def gradcheck(fn, arrays, rng=None, eps=1e-6, max_coords=None, wrt=None):
    """Largest relative error between analytic and numeric gradients.

    ``fn`` maps tensors to a tensor; non-scalar outputs are projected onto a
    random direction. The error for one input is ``max|a - n| / max|n|``
    over the probed coordinates (floored at 1e-8 so all-zero gradients
    compare absolutely). Inputs should be float64.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out, proj = _scalarize(fn(*tensors), rng)
    out.backward()
    worst = 0.0
    for i in wrt:
        size = arrays[i].size
        if max_coords is None or size <= max_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords, replace=False)
        g = tensors[i].grad
        analytic = np.zeros(len(coords)) if g is None else g.reshape(-1)[coords]
        numeric = numeric_grad(fn, arrays, i, coords, eps, proj)
        err = np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), 1e-8)
        worst = max(worst, float(err))
    return worst
