"""Gait recognition: dual-branch 3D-conv features with ratio attention and RGB->silhouette distillation.

Both branches share one architecture (but not parameters):

    F_1 = r * conv3d_0(x)                       (bias-free, temporal length kept)
    F_i = conv3d_{i-1}(pool(lrelu(F_{i-1})))    i = 2..N, spatial 2x pooling
    I   = linear(flatten(tmax(lrelu(F_N))))

``r`` comes from the per-frame resizing ratios and is shared by both branches.
Only the silhouette branch (and ``r``) is needed at inference.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .dhs import loop_pad
from .silio import RatioTrack, normalize
from .synth import FULL_GAIT, runs
from .tensor import (
    DegenerateBatchError,
    ParameterStore,
    Tensor,
    avg_pool,
    conv1d,
    conv3d,
    cosine_distance,
    leaky_relu,
    linear,
    max_pool,
    max_pool_temporal,
    mse,
    pad_edge,
    sgd_momentum_step,
    sigmoid,
    step_lr,
    stop_gradient,
    triplet_loss_batch_all,
)

log = logging.getLogger(__name__)

BRANCHES = ("sil", "rgb")


class ConfigError(ValueError):
    pass


@dataclass
class GarConfig:
    n_blocks: int = 3
    channels: tuple = (16, 32, 64)
    embedding_dim: int = 64
    margin: float = 0.2
    lambda_f: float = 0.425
    lambda_s: float = 0.425
    lambda_distill: float = 0.15
    ratio_kernel: int = 3
    use_ratio: bool = True
    distance: str = "mse"  # distillation distance: "mse" | "cosine"
    distill_blocks: tuple | None = None  # None: every block
    stem_pool: int = 4  # spatial average pooling of the 64x64 chips before block 1 (CPU budget)
    frame_size: int = 64
    clip_len: int = 30
    P: int = 8
    K: int = 8
    steps: int = 2000
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = (1500,)
    slope: float = 0.01
    embed_stride: int = 15

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.n_blocks < 2:
            raise ConfigError("n_blocks must be >= 2")
        if len(self.channels) != self.n_blocks:
            raise ConfigError(f"{len(self.channels)} channel widths for {self.n_blocks} blocks")
        if self.embedding_dim < 8:
            raise ConfigError("embedding_dim must be >= 8")
        if self.distance not in ("mse", "cosine"):
            raise ConfigError(f"unknown distillation distance {self.distance!r}")
        if self.distill_blocks is not None:
            self.distill_blocks = tuple(self.distill_blocks)
            if any(not 0 <= b < self.n_blocks for b in self.distill_blocks):
                raise ConfigError(f"distill_blocks {self.distill_blocks} outside 0..{self.n_blocks - 1}")

    @property
    def lambdas(self):
        return self.lambda_f, self.lambda_s, self.lambda_distill

    @property
    def uses_rgb(self):
        return self.lambda_f > 0 or self.lambda_distill > 0

    @property
    def head_in(self):
        side = self.frame_size // self.stem_pool // 2 ** (self.n_blocks - 1)
        return side * side * self.channels[-1]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def desk(cls, **overrides):
        """Narrower, smaller-batch preset that trains in minutes on one CPU core."""
        kw = dict(channels=(8, 16, 32), P=8, K=4, steps=400, milestones=(300,))
        kw.update(overrides)
        return cls(**kw)


# -- parameters -----------------------------------------------------------------------------
def init_gar(config=None, seed=0, dtype=np.float32, adapters=True):
    config = config or GarConfig()
    rng = np.random.default_rng([int(seed), 21])
    store = ParameterStore(dtype)
    for branch, cin0 in (("sil", 1), ("rgb", 3)):
        cin = cin0
        for i, c in enumerate(config.channels):
            store.add(f"{branch}.conv{i}.w", rng.normal(0, np.sqrt(2.0 / (27 * cin)), (3, 3, 3, cin, c)))
            if i > 0:
                store.add(f"{branch}.conv{i}.b", np.zeros(c))
            cin = c
        store.add(f"{branch}.head.w", rng.normal(0, np.sqrt(1.0 / config.head_in), (config.head_in, config.embedding_dim)))
        store.add(f"{branch}.head.b", np.zeros(config.embedding_dim))
    k = config.ratio_kernel
    store.add("ratio.w", rng.normal(0, np.sqrt(1.0 / (2 * k)), (k, 2, 1)))
    store.add("ratio.b", np.zeros(1))
    if adapters:
        for i, c in enumerate(config.channels):
            store.add(f"adapt{i}.w", np.eye(c).reshape(1, 1, 1, c, c) + rng.normal(0, 0.01, (1, 1, 1, c, c)))
            store.add(f"adapt{i}.b", np.zeros(c))
    return store


def inference_names(store):
    """Parameters needed for silhouette-only embedding (adapters and RGB excluded)."""
    return [n for n in store.names() if n.startswith("sil.") or n.startswith("ratio.")]


def rgb_names(store):
    return [n for n in store.names() if n.startswith("rgb.")]


def adapter_names(store):
    return [n for n in store.names() if n.startswith("adapt")]


# -- forward ------------------------------------------------------------------------------
def ratio_attention(ratios, store, config=None):
    """(B, T, 2) ratios -> (B, T, 1) attention in (0, 1); edges replicated so length is kept."""
    config = config or GarConfig()
    x = ratios if isinstance(ratios, Tensor) else Tensor(np.asarray(ratios, dtype=store.dtype))
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    half = config.ratio_kernel // 2
    x = pad_edge(x, ((0, 0), (half, half), (0, 0)))
    return sigmoid(conv1d(x, store["ratio.w"], store["ratio.b"]))


def branch_forward(branch, x, r, store, config):
    """Features per block and the embedding for one branch. ``x``: (B, T, H, W, C)."""
    h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=store.dtype))
    if config.stem_pool > 1:
        h = avg_pool(h, axes=(2, 3), size=config.stem_pool)
    h = conv3d(h, store[f"{branch}.conv0.w"], None, padding=1)
    if r is not None:
        B, T = r.shape[:2]
        h = h * r.reshape(B, T, 1, 1, 1)
    feats = [h]
    for i in range(1, config.n_blocks):
        h = max_pool(leaky_relu(h, config.slope), axes=(2, 3))
        h = conv3d(h, store[f"{branch}.conv{i}.w"], store[f"{branch}.conv{i}.b"], padding=1)
        feats.append(h)
    h = max_pool_temporal(leaky_relu(h, config.slope), axis=1)
    h = h.reshape(h.shape[0], -1)
    emb = linear(h, store[f"{branch}.head.w"], store[f"{branch}.head.b"])
    return feats, emb


@dataclass
class DualFeatures:
    sil: list  # F_i^s per block
    rgb: list  # F_i^f per block (empty when the RGB branch is skipped)
    emb_sil: Tensor
    emb_rgb: Tensor | None
    r: Tensor | None
    adapted: list = field(default_factory=list)  # C_i(F_i^s)


def forward_dual(sil, rgb, ratios, store, config=None, r_override=None, with_rgb=True):
    """Run both branches on temporally aligned clips.

    ``sil``: (B, T, H, W) or (B, T, H, W, 1); ``rgb``: (B, T, H, W, 3);
    ``ratios``: (B, T, 2). ``r_override`` replaces the attention signal
    (e.g. all ones) for ablations and checks.
    """
    config = config or GarConfig()
    sil = np.asarray(sil, dtype=store.dtype)
    if sil.ndim == 4:
        sil = sil[..., None]
    B, T = sil.shape[:2]
    if ratios is not None and np.asarray(ratios).shape[:2] != (B, T):
        raise ValueError(f"ratios {np.asarray(ratios).shape} not aligned with silhouettes {sil.shape}")
    if with_rgb and rgb is not None and np.asarray(rgb).shape[:2] != (B, T):
        raise ValueError(f"rgb {np.asarray(rgb).shape} not aligned with silhouettes {sil.shape}")
    if r_override is not None:
        r = Tensor(np.broadcast_to(np.asarray(r_override, dtype=store.dtype), (B, T)).reshape(B, T, 1).copy())
    elif config.use_ratio:
        r = ratio_attention(ratios, store, config)
    else:
        r = None
    feats_s, emb_s = branch_forward("sil", sil, r, store, config)
    feats_f, emb_f = [], None
    if with_rgb and rgb is not None:
        feats_f, emb_f = branch_forward("rgb", np.asarray(rgb, dtype=store.dtype), r, store, config)
    return DualFeatures(feats_s, feats_f, emb_s, emb_f, r)


def _distill_blocks(config):
    return range(config.n_blocks) if config.distill_blocks is None else config.distill_blocks


def distill_loss(feats, store, config=None):
    """Sum over blocks of D(stop_gradient(F_i^f), C_i(F_i^s))."""
    config = config or GarConfig()
    if len(feats.sil) != len(feats.rgb):
        raise ConfigError(f"{len(feats.sil)} silhouette blocks vs {len(feats.rgb)} RGB blocks")
    dist = mse if config.distance == "mse" else cosine_distance
    total = None
    feats.adapted = []
    for i in _distill_blocks(config):
        adapted = conv3d(feats.sil[i], store[f"adapt{i}.w"], store[f"adapt{i}.b"])
        feats.adapted.append(adapted)
        term = dist(stop_gradient(feats.rgb[i]), adapted)
        total = term if total is None else total + term
    return total


def train_loss(sil, rgb, ratios, labels, store, config=None):
    """Weighted sum of the two triplet terms and the distillation term; returns (loss, parts)."""
    config = config or GarConfig()
    lf, ls, ld = config.lambdas
    feats = forward_dual(sil, rgb, ratios, store, config, with_rgb=config.uses_rgb)
    l_s = triplet_loss_batch_all(feats.emb_sil, labels, config.margin)
    loss = l_s * ls
    parts = {"tri_s": float(l_s.data)}
    if config.uses_rgb:
        l_f = triplet_loss_batch_all(feats.emb_rgb, labels, config.margin)
        loss = loss + l_f * lf
        parts["tri_f"] = float(l_f.data)
        if ld > 0:
            l_d = distill_loss(feats, store, config)
            loss = loss + l_d * ld
            parts["distill"] = float(l_d.data)
    parts["total"] = float(loss.data)
    return loss, parts


# -- data -----------------------------------------------------------------------------------
@dataclass
class ClipSource:
    """Normalized chips of one sequence, restricted to full-body walking runs."""

    identity: int
    sil: np.ndarray  # (T, 64, 64) uint8
    rgb: np.ndarray | None  # (T, 64, 64, 3) float16
    ratios: np.ndarray  # (T, 2) float32
    runs: list  # [(start, end)] with end - start >= clip_len


def prepare_sources(corpus, split="train", clip_len=30, with_rgb=True, styles=None):
    sources = []
    for e in corpus.entries_for(split, styles):
        sil, rgb, gt = corpus.sequence(e, with_rgb=with_rgb)
        if with_rgb:
            norm, ratios, nrgb = normalize(sil, rgb=rgb)
            chips = nrgb.frames.astype(np.float16)
        else:
            norm, ratios = normalize(sil)
            chips = None
        gait = gt.labels[norm.frame_index] == FULL_GAIT
        ok = [(s, t) for s, t in runs(gait) if t - s >= clip_len]
        if ok:
            sources.append(ClipSource(e["identity"], norm.masks, chips, ratios.values, ok))
    return sources


def sample_pk(sources, P, K, clip_len, rng, with_rgb=True):
    by_id = {}
    for i, s in enumerate(sources):
        by_id.setdefault(s.identity, []).append(i)
    ids = sorted(by_id)
    if len(ids) < 2:
        raise DegenerateBatchError("need at least two training identities")
    P = min(P, len(ids))
    chosen = rng.choice(ids, size=P, replace=False)
    sil, rgb, rat, lab = [], [], [], []
    for ident in chosen:
        for _ in range(K):
            src = sources[by_id[ident][int(rng.integers(len(by_id[ident])))]]
            s, e = src.runs[int(rng.integers(len(src.runs)))]
            st = int(rng.integers(s, e - clip_len + 1))
            sil.append(src.sil[st:st + clip_len])
            if with_rgb:
                rgb.append(src.rgb[st:st + clip_len].astype(np.float32))
            rat.append(src.ratios[st:st + clip_len])
            lab.append(int(ident))
    return (np.stack(sil), np.stack(rgb) if with_rgb else None, np.stack(rat), np.asarray(lab))


@dataclass
class GarTrainResult:
    store: ParameterStore
    trace: list  # per-step dicts of loss parts
    skipped: int = 0


def train_gar(corpus, config=None, seed=0, sources=None, log_fn=None, log_every=50):
    """(P x K)-batch training on 30-frame clips of ground-truth walking."""
    config = config or GarConfig()
    if sources is None:
        sources = prepare_sources(corpus, "train", config.clip_len, config.uses_rgb)
    ids = sorted({s.identity for s in sources})
    if len(ids) < 2:
        raise DegenerateBatchError(f"training needs at least 2 identities, found {len(ids)}")
    if len(ids) < config.P:
        warnings.warn(f"only {len(ids)} training identities; shrinking P from {config.P}", RuntimeWarning)
    rng = np.random.default_rng([int(seed), 22])
    store = init_gar(config, seed)
    trace = []
    skipped = 0
    for step in range(config.steps):
        sil, rgb, rat, lab = sample_pk(sources, config.P, config.K, config.clip_len, rng, config.uses_rgb)
        store.zero_grad()
        try:
            loss, parts = train_loss(sil, rgb, rat, lab, store, config)
        except DegenerateBatchError as exc:
            log.warning("skipping step %d: %s", step, exc)
            skipped += 1
            continue
        loss.backward()
        sgd_momentum_step(store, step_lr(config.lr, step, config.milestones), config.momentum, config.weight_decay)
        parts["step"] = step
        trace.append(parts)
        if log_fn and ((step + 1) % log_every == 0 or step + 1 == config.steps):
            recent = trace[-log_every:]
            log_fn(f"gar step {step + 1}: " + " ".join(
                f"{k} {np.mean([t[k] for t in recent]):.4f}" for k in parts if k != "step"))
    return GarTrainResult(store, trace, skipped)


# -- inference --------------------------------------------------------------------------------
def clip_starts(T, clip_len=30, stride=15):
    if T <= clip_len:
        return [0]
    starts = list(range(0, T - clip_len + 1, stride))
    if starts[-1] != T - clip_len:
        starts.append(T - clip_len)
    return starts


def embed(sil, ratios, store, config=None, intervals=None, r_override=None, batch=16):
    """Silhouette-only embedding: mean over 30-frame clips (stride 15).

    ``sil``: normalized (T, 64, 64) masks; ``ratios``: (T, 2) or RatioTrack.
    ``intervals`` restricts clips to those frame ranges. Returns
    ``(vector, flags)``; ``flags["padded"]`` marks loop-padded short input.
    """
    config = config or GarConfig()
    masks = sil.masks if hasattr(sil, "masks") else np.asarray(sil)
    rat = ratios.values if isinstance(ratios, RatioTrack) else np.asarray(ratios, dtype=np.float32)
    spans = [(0, len(masks))] if intervals is None else [(int(s), int(e)) for s, e, *_ in intervals]
    clips_s, clips_r = [], []
    padded = False
    for s, e in spans:
        ms, rs = masks[s:e], rat[s:e]
        if len(ms) == 0:
            continue
        if len(ms) < config.clip_len:
            ms = loop_pad(ms, config.clip_len, axis=0)
            rs = loop_pad(rs, config.clip_len, axis=0)
            padded = True
        for st in clip_starts(len(ms), config.clip_len, config.embed_stride):
            clips_s.append(ms[st:st + config.clip_len])
            clips_r.append(rs[st:st + config.clip_len])
    if not clips_s:
        raise ValueError("nothing to embed")
    embs = []
    for lo in range(0, len(clips_s), batch):
        f = forward_dual(np.stack(clips_s[lo:lo + batch]), None, np.stack(clips_r[lo:lo + batch]), store, config,
                         r_override=r_override, with_rgb=False)
        embs.append(f.emb_sil.data)
    return np.concatenate(embs).mean(axis=0), {"padded": padded, "clips": len(clips_s)}
