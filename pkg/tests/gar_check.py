"""Finite-difference check of a whole small GAR model (float64)."""
import numpy as np

from gader import gar as G
from gader.tensor import Tensor

TINY = dict(n_blocks=2, channels=(3, 4), embedding_dim=8, frame_size=8, stem_pool=1, clip_len=5)


def tiny_batch(rng, B=4, T=5, size=8):
    sil = rng.uniform(0, 1, (B, T, size, size))
    rgb = rng.uniform(0, 1, (B, T, size, size, 3))
    rat = rng.uniform(0.3, 1.5, (B, T, 2))
    lab = np.repeat(np.arange(B // 2), 2)
    return sil, rgb, rat, lab


def gar_gradcheck(seed, n_params=20, eps=1e-6, **overrides):
    """Max relative error over ``n_params`` random scalar parameters.

    Checks a random projection of both embeddings, the training loss with
    distillation off over every non-adapter parameter, and the full loss over
    silhouette/adapter parameters only. RGB and ratio parameters reach the
    distillation target through the stop-gradient, so finite differences
    disagree there by design.
    """
    rng = np.random.default_rng(seed)
    cfg = G.GarConfig(**{**TINY, **overrides})
    store = G.init_gar(cfg, seed, dtype=np.float64)
    for n in store.names():  # break the zero biases / near-identity adapters for a generic point
        store[n].data += rng.normal(0, 0.05, store[n].shape)
    sil, rgb, rat, lab = tiny_batch(rng)
    proj = rng.normal(size=(2, sil.shape[0], cfg.embedding_dim))

    def emb_obj():
        f = G.forward_dual(sil, rgb, rat, store, cfg)
        return (f.emb_sil * Tensor(proj[0])).sum() + (f.emb_rgb * Tensor(proj[1])).sum()

    no_distill = G.GarConfig(**{**TINY, **overrides, "lambda_distill": 0.0})

    def loss_obj():
        return G.train_loss(sil, rgb, rat, lab, store, cfg)[0]

    def loss_nd_obj():
        return G.train_loss(sil, rgb, rat, lab, store, no_distill)[0]

    model = [n for n in store.names() if not n.startswith("adapt")]
    student = [n for n in store.names() if n.startswith("sil.") or n.startswith("adapt")]
    worst = 0.0
    for obj, names in ((emb_obj, model), (loss_nd_obj, model), (loss_obj, student)):
        picks = []
        for _ in range(n_params):
            n = names[int(rng.integers(len(names)))]
            picks.append((n, int(rng.integers(store[n].data.size))))
        store.zero_grad()
        obj().backward()
        analytic = np.array([store[n].grad.reshape(-1)[c] for n, c in picks])
        numeric = np.zeros(len(picks))
        for k, (n, c) in enumerate(picks):
            p = store[n].data.reshape(-1)
            orig = p[c]
            vals = []
            for s in (eps, -eps):
                p[c] = orig + s
                vals.append(float(obj().data))
            p[c] = orig
            numeric[k] = (vals[0] - vals[1]) / (2 * eps)
        worst = max(worst, float(np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), 1e-8)))
    return worst
