"""Double Helical Signature: the knee-row slice of a normalized silhouette sequence."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .silio import CHIP, save_pgm

KNEE_FRACTION = 0.75  # rows counted from the top; the knee sits a quarter up from the feet
WINDOW_SIZES = (33, 50, 80)
INFER_STRIDE = 10
MIN_LEN, MAX_LEN = 30, 100


class TooShortError(ValueError):
    pass


@dataclass
class DhsImage:
    data: np.ndarray  # (W, T) uint8
    knee_row: int

    @property
    def W(self):
        return self.data.shape[0]

    @property
    def T(self):
        return self.data.shape[1]

    def window(self, start, length):
        return DhsWindow(start, length, self.data[:, start:start + length])


@dataclass
class DhsWindow:
    start: int
    length: int
    data: np.ndarray  # (W, length)

    @property
    def end(self):
        return self.start + self.length


def knee_row(height=CHIP):
    return int(np.floor(KNEE_FRACTION * height))


def extract_dhs(seq):
    """Stack row ``floor(0.75 H)`` of every normalized frame as the columns of a W x T image."""
    if not (seq.H == CHIP and seq.W == CHIP):
        raise ValueError(f"extract_dhs needs normalized {CHIP}x{CHIP} frames, got {seq.H}x{seq.W}")
    row = knee_row(seq.H)
    return DhsImage(np.ascontiguousarray(seq.masks[:, row, :].T), row)


def concat_dhs(images):
    return DhsImage(np.concatenate([im.data for im in images], axis=1), images[0].knee_row)


def enumerate_windows(img, sizes=WINDOW_SIZES, stride=INFER_STRIDE):
    """Sliding windows per size, plus a flush window ending at T; sorted by (start, length)."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if not len(sizes):
        raise ValueError("need at least one window size")
    T = img.T
    spans = set()
    for s in sizes:
        if s > T:
            continue
        starts = list(range(0, T - s + 1, stride))
        if starts[-1] != T - s:
            starts.append(T - s)
        spans.update((st, s) for st in starts)
    return [img.window(st, s) for st, s in sorted(spans)]


def random_crop(img, rng, min_len=MIN_LEN, max_len=MAX_LEN, length=None):
    """Uniform length in [min_len, min(max_len, T)], then a uniform start."""
    T = img.T
    if T < min_len:
        raise TooShortError(f"DHS has {T} frames, need at least {min_len}")
    if length is None:
        length = int(rng.integers(min_len, min(max_len, T) + 1))
    elif not min_len <= length <= T:
        raise TooShortError(f"cannot crop {length} frames from {T}")
    start = int(rng.integers(0, T - length + 1))
    return img.window(start, length)


def loop_pad(data, length, axis=-1):
    """Tile along ``axis`` until it is at least ``length`` long, then cut."""
    n = data.shape[axis]
    if n >= length:
        return data
    reps = -(-length // n)
    tiled = np.concatenate([data] * reps, axis=axis)
    return np.take(tiled, np.arange(length), axis=axis)


def mean_width(img):
    """Mean foreground pixels per DHS column."""
    return float(img.data.sum(axis=0).mean())


def autocorrelation(signal, max_lag):
    """Normalized autocorrelation of a (D, T) signal summed over D, for lags 0..max_lag."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    x = x - x.mean(axis=1, keepdims=True)
    T = x.shape[1]
    denom = (x * x).sum()
    out = np.zeros(max_lag + 1)
    if denom == 0:
        return out
    for lag in range(max_lag + 1):
        out[lag] = (x[:, : T - lag] * x[:, lag:]).sum() / denom * T / (T - lag)
    return out


def export_pgm(img, path):
    """One row per x, one column per frame, foreground white."""
    save_pgm(img.data, path)
