"""Gait detector: a 4-class DHS window classifier, 1D NMS, gap merging and the usability gate."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dhs as dhs_mod
from .silio import normalize
from .synth import CLASSES, FULL_GAIT
from .tensor import (
    ParameterStore,
    Tensor,
    conv2d,
    cross_entropy,
    leaky_relu,
    max_pool,
    max_pool_temporal,
    mlp_forward,
    sgd_momentum_step,
    softmax,
    step_lr,
)

log = logging.getLogger(__name__)


class TrainingDataError(ValueError):
    pass


@dataclass
class DetectorConfig:
    channels: tuple = (16, 32, 64, 64, 64)
    pool_blocks: int = 3  # spatial 2x max-pool after each of the first blocks
    mlp_hidden: int = 64
    slope: float = 0.01
    window_sizes: tuple = dhs_mod.WINDOW_SIZES
    stride: int = dhs_mod.INFER_STRIDE
    tau: float = 0.5  # confidence gate on full-gait windows
    iou: float = 0.5
    gap: int = 10
    rho_min: float = 0.2
    min_len: int = dhs_mod.MIN_LEN
    max_len: int = dhs_mod.MAX_LEN
    batch: int = 32
    steps: int = 1200
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple = (900,)
    mirror: bool = True
    gait_purity: float = 0.75  # share of full-gait frames a training crop needs to be labelled full-gait
    eval_every: int = 200

    def to_dict(self):
        return asdict(self)


@dataclass
class WindowPrediction:
    start: int
    length: int
    label: int
    confidence: float
    probs: np.ndarray = field(default=None, repr=False)

    @property
    def end(self):
        return self.start + self.length

    @property
    def class_name(self):
        return CLASSES[self.label]


@dataclass
class DetectionResult:
    intervals: list  # [(start, end, confidence)]
    T: int
    rho: float
    usable: bool
    reason: str = ""

    def frame_mask(self):
        m = np.zeros(self.T, dtype=bool)
        for s, e, _ in self.intervals:
            m[s:e] = True
        return m

    def to_json(self, file=None):
        return {
            "file": file,
            "intervals": [{"start": int(s), "end": int(e), "confidence": float(c)} for s, e, c in self.intervals],
            "rho": float(self.rho),
            "usable": bool(self.usable),
        }


# -- model ---------------------------------------------------------------------------
def init_detector(config=None, seed=0, dtype=np.float32):
    config = config or DetectorConfig()
    rng = np.random.default_rng([int(seed), 11])
    store = ParameterStore(dtype)
    cin = 1
    for i, c in enumerate(config.channels):
        fan_in = 9 * cin
        store.add(f"conv{i}.w", rng.normal(0, np.sqrt(2.0 / fan_in), (3, 3, cin, c)))
        store.add(f"conv{i}.b", np.zeros(c))
        cin = c
    store.add("mlp0.w", rng.normal(0, np.sqrt(2.0 / cin), (cin, config.mlp_hidden)))
    store.add("mlp0.b", np.zeros(config.mlp_hidden))
    store.add("mlp1.w", rng.normal(0, np.sqrt(1.0 / config.mlp_hidden), (config.mlp_hidden, len(CLASSES))))
    store.add("mlp1.b", np.zeros(len(CLASSES)))
    return store


def detector_logits(store, x, config=None):
    """``x``: (N, W, t, 1) DHS windows -> (N, 4) logits."""
    config = config or DetectorConfig()
    h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=store.dtype))
    for i in range(len(config.channels)):
        h = conv2d(h, store[f"conv{i}.w"], store[f"conv{i}.b"], padding=1)
        h = leaky_relu(h, config.slope)
        if i < config.pool_blocks:
            h = max_pool(h, axes=(1, 2))
    h = max_pool_temporal(h, axis=2)  # (N, W', C): invariant to window length
    h = h.mean(axis=1)
    return mlp_forward(h, [(store["mlp0.w"], store["mlp0.b"]), (store["mlp1.w"], store["mlp1.b"])], config.slope)


def _as_input(windows, dtype):
    return np.stack([np.asarray(w, dtype=dtype) for w in windows])[..., None]


def classify_windows(store, windows, config=None):
    """Predict every window; windows are grouped by length so each group is one batch."""
    config = config or DetectorConfig()
    out = [None] * len(windows)
    by_len = {}
    for i, w in enumerate(windows):
        if w.length < config.min_len:
            raise ValueError(f"window of {w.length} frames is shorter than {config.min_len}; loop-pad first")
        by_len.setdefault(w.length, []).append(i)
    for length, idx in sorted(by_len.items()):
        x = _as_input([windows[i].data for i in idx], store.dtype)
        probs = softmax(detector_logits(store, x, config), axis=1).data
        for j, i in enumerate(idx):
            lab = int(np.argmax(probs[j]))
            out[i] = WindowPrediction(windows[i].start, windows[i].length, lab, float(probs[j, lab]), probs[j])
    return out


def classify_window(store, window, config=None):
    return classify_windows(store, [window], config)[0]


# -- training -------------------------------------------------------------------------
def crop_label(labels, gait_purity=0.5):
    """Majority class, except that full-gait needs ``gait_purity`` of the frames.

    A crop straddling a walk boundary below that share takes the most
    frequent of the other classes, so boundary windows are taught as not
    walking and detected intervals stop short of standing or occluded frames.
    """
    counts = np.bincount(labels, minlength=len(CLASSES))
    if counts[FULL_GAIT] >= gait_purity * len(labels):
        return FULL_GAIT
    counts[FULL_GAIT] = -1
    return int(counts.argmax())


def _prepare(corpus, split):
    items = []
    for e in corpus.entries_for(split):
        sil, _, gt = corpus.sequence(e)
        norm, _ = normalize(sil)
        img = dhs_mod.extract_dhs(norm)
        items.append((img.data, gt.labels[norm.frame_index]))
    return items


def sample_batch(items, length, batch, rng, mirror=True, gait_purity=0.5):
    """Class-balanced crops of one common length, labelled by ``crop_label``."""
    by_class = [[] for _ in CLASSES]
    for si, (_, lab) in enumerate(items):
        for c in range(len(CLASSES)):
            if (lab == c).any():
                by_class[c].append(si)
    xs, ys = [], []
    for _ in range(batch):
        c = int(rng.integers(len(CLASSES)))
        si = by_class[c][int(rng.integers(len(by_class[c])))]
        data, lab = items[si]
        if data.shape[1] < length:
            data = dhs_mod.loop_pad(data, length, axis=1)
            lab = dhs_mod.loop_pad(lab, length, axis=0)
        frames = np.flatnonzero(lab == c)
        anchor = int(frames[int(rng.integers(len(frames)))])
        lo = max(0, anchor - length + 1)
        hi = min(anchor, data.shape[1] - length)
        start = int(rng.integers(lo, hi + 1))
        crop = data[:, start:start + length]
        if mirror and rng.uniform() < 0.5:
            crop = crop[::-1]
        xs.append(crop)
        ys.append(crop_label(lab[start:start + length], gait_purity))
    return np.stack(xs)[..., None], np.asarray(ys)


def pure_windows(items, sizes=dhs_mod.WINDOW_SIZES, stride=dhs_mod.INFER_STRIDE):
    """All inference windows lying inside a single ground-truth class."""
    out = []
    for data, lab in items:
        img = dhs_mod.DhsImage(data, dhs_mod.knee_row())
        for w in dhs_mod.enumerate_windows(img, sizes, stride):
            seg = lab[w.start:w.end]
            if (seg == seg[0]).all():
                out.append((w, int(seg[0])))
    return out


def window_accuracy(store, labelled_windows, config=None):
    if not labelled_windows:
        return float("nan")
    preds = classify_windows(store, [w for w, _ in labelled_windows], config)
    return float(np.mean([p.label == y for p, (_, y) in zip(preds, labelled_windows)]))


@dataclass
class DetectorTrainResult:
    store: ParameterStore
    losses: list
    heldout_accuracy: list  # (step, accuracy)


def train_detector(corpus, config=None, seed=0, log_fn=None):
    """Cross-entropy training on random DHS crops (30-100 frames, one length per step)."""
    config = config or DetectorConfig()
    train = _prepare(corpus, "train")
    present = set(np.concatenate([lab for _, lab in train]).tolist()) if train else set()
    missing = [CLASSES[c] for c in range(len(CLASSES)) if c not in present]
    if missing:
        raise TrainingDataError(f"training split lacks classes: {missing}")
    heldout = pure_windows(_prepare(corpus, "test"))
    rng = np.random.default_rng([int(seed), 12])
    store = init_detector(config, seed)
    losses, accs = [], []
    for step in range(config.steps):
        length = int(rng.integers(config.min_len, config.max_len + 1))
        x, y = sample_batch(train, length, config.batch, rng, config.mirror, config.gait_purity)
        store.zero_grad()
        loss = cross_entropy(detector_logits(store, x.astype(store.dtype), config), y)
        loss.backward()
        lr = step_lr(config.lr, step, config.milestones)
        sgd_momentum_step(store, lr, config.momentum, config.weight_decay)
        losses.append(float(loss.data))
        if (step + 1) % config.eval_every == 0 or step + 1 == config.steps:
            acc = window_accuracy(store, heldout, config) if heldout else float("nan")
            accs.append((step + 1, acc))
            msg = f"detector step {step + 1}: loss {np.mean(losses[-config.eval_every:]):.4f} held-out acc {acc:.4f}"
            log.info(msg)
            if log_fn:
                log_fn(msg)
    return DetectorTrainResult(store, losses, accs)


# -- post-processing -------------------------------------------------------------------
def temporal_iou(a, b):
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union if union > 0 else 0.0


def nms_1d(preds, iou_threshold=0.5):
    """Greedy NMS: keep the most confident window, drop remaining ones with IoU above the threshold.

    Ties in confidence go to the earlier start, then the shorter window.
    """
    order = sorted(preds, key=lambda p: (-p.confidence, p.start, p.length))
    kept = []
    for p in order:
        if all(temporal_iou((p.start, p.end), (k.start, k.end)) <= iou_threshold for k in kept):
            kept.append(p)
    return kept


def merge_intervals(intervals, gap):
    """Union overlapping intervals and fuse neighbours closer than ``gap`` frames.

    Items are ``(start, end)`` or ``(start, end, confidence)``; the fused
    confidence is the maximum of its parts.
    """
    items = sorted((tuple(iv) if len(iv) == 3 else (iv[0], iv[1], 1.0)) for iv in intervals)
    out = []
    for s, e, c in items:
        if out and s - out[-1][1] < gap:
            ps, pe, pc = out[-1]
            out[-1] = (ps, max(pe, e), max(pc, c))
        else:
            out.append((s, e, c))
    if intervals and len(intervals[0]) == 2:
        return [(s, e) for s, e, _ in out]
    return out


def coverage(intervals, T):
    return sum(e - s for s, e, *_ in intervals) / T if T else 0.0


def detect(store, seq, config=None):
    """Localize full-body walking in a normalized silhouette sequence."""
    config = config or DetectorConfig()
    if not seq.is_normalized:
        raise ValueError("detect expects a normalized sequence")
    T = seq.T
    if T < min(config.window_sizes):
        return DetectionResult([], T, 0.0, False, f"too short: {T} frames < {min(config.window_sizes)}")
    img = dhs_mod.extract_dhs(seq)
    windows = dhs_mod.enumerate_windows(img, config.window_sizes, config.stride)
    preds = classify_windows(store, windows, config)
    gait = [p for p in preds if p.label == FULL_GAIT and p.confidence >= config.tau]
    kept = nms_1d(gait, config.iou)
    merged = merge_intervals([(p.start, p.end, p.confidence) for p in kept], config.gap)
    rho = coverage(merged, T)
    usable = rho >= config.rho_min
    return DetectionResult(merged, T, rho, usable, "" if usable else f"coverage {rho:.3f} < {config.rho_min}")


def score_detection(pred, truth):
    """Frame agreement between predicted and true gait masks; correct when >= 50%."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    agreement = float((pred == truth).mean())
    return {"frame_agreement": agreement, "sequence_correct": agreement >= 0.5}
