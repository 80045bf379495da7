"""Retrieval and verification metrics over embedding sets."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np

FAR_POINTS = (1e-4, 1e-3, 1e-2, 1e-1)
MIN_IMPOSTORS = {1e-4: 10_000}  # fewer impostor pairs -> the point is reported unavailable


class EvalError(ValueError):
    pass


# -- embedding files ---------------------------------------------------------------------------
@dataclass
class EmbeddingSet:
    seq_ids: list
    identities: np.ndarray  # (n,) int
    conditions: list
    vectors: np.ndarray  # (n, d)

    def __post_init__(self):
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64).reshape(len(self.seq_ids), -1)
        if not (len(self.seq_ids) == len(self.identities) == len(self.conditions)):
            raise EvalError("embedding set columns have different lengths")
        if not np.isfinite(self.vectors).all():
            raise EvalError("embedding set contains non-finite entries")

    def __len__(self):
        return len(self.seq_ids)

    @property
    def dim(self):
        return self.vectors.shape[1]

    def subset(self, mask):
        idx = np.flatnonzero(mask)
        return EmbeddingSet([self.seq_ids[i] for i in idx], self.identities[idx],
                            [self.conditions[i] for i in idx], self.vectors[idx])


def save_embeddings(es, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seq_id", "identity", "condition"] + [f"e{i}" for i in range(es.dim)])
        for sid, ident, cond, vec in zip(es.seq_ids, es.identities, es.conditions, es.vectors):
            # %.17g round-trips float64 exactly
            w.writerow([sid, int(ident), cond] + ["%.17g" % v for v in vec])


def load_embeddings(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["seq_id", "identity", "condition"]:
        raise EvalError(f"{path}: missing embedding CSV header")
    d = len(rows[0]) - 3
    ids, labels, conds, vecs = [], [], [], []
    for n, r in enumerate(rows[1:], start=2):
        if len(r) != d + 3:
            raise EvalError(f"{path}:{n}: expected {d + 3} fields, got {len(r)}")
        ids.append(r[0])
        labels.append(int(r[1]))
        conds.append(r[2])
        vecs.append([float(v) for v in r[3:]])
    return EmbeddingSet(ids, labels, conds, np.asarray(vecs, dtype=np.float64).reshape(len(ids), d))


# -- score matrices --------------------------------------------------------------------------
@dataclass
class ScoreMatrix:
    """Probe x gallery distances (smaller = more similar)."""

    dist: np.ndarray
    probe_labels: np.ndarray
    gallery_labels: np.ndarray
    probe_ids: list | None = None
    gallery_ids: list | None = None

    def __post_init__(self):
        self.dist = np.asarray(self.dist, dtype=np.float64)
        self.probe_labels = np.asarray(self.probe_labels)
        self.gallery_labels = np.asarray(self.gallery_labels)
        if self.dist.shape != (len(self.probe_labels), len(self.gallery_labels)):
            raise EvalError(f"distance matrix {self.dist.shape} does not match "
                            f"{len(self.probe_labels)} probes x {len(self.gallery_labels)} gallery")
        if not np.isfinite(self.dist).all():
            raise EvalError("score matrix contains non-finite entries")


def euclidean_scores(probe, gallery):
    p, g = probe.vectors, gallery.vectors
    if p.shape[1] != g.shape[1]:
        raise EvalError(f"embedding dims differ: {p.shape[1]} vs {g.shape[1]}")
    d2 = (p * p).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * p @ g.T
    return ScoreMatrix(np.sqrt(np.maximum(d2, 0.0)), probe.identities, gallery.identities,
                       list(probe.seq_ids), list(gallery.seq_ids))


def _self_mask(scores):
    if scores.probe_ids is None or scores.gallery_ids is None:
        return np.zeros(scores.dist.shape, dtype=bool)
    g = np.asarray(scores.gallery_ids, dtype=object)
    return np.array([g == pid for pid in scores.probe_ids], dtype=bool).reshape(scores.dist.shape)


def _ranked(scores, exclude_self=True):
    """Per usable probe: the gallery match flags in ranked order (ties by gallery index)."""
    excl = _self_mask(scores) if exclude_self else np.zeros(scores.dist.shape, dtype=bool)
    out, dropped = [], 0
    for i in range(scores.dist.shape[0]):
        keep = np.flatnonzero(~excl[i])
        order = keep[np.lexsort((keep, scores.dist[i, keep]))]
        match = scores.gallery_labels[order] == scores.probe_labels[i]
        if not match.any():
            dropped += 1
            continue
        out.append(match)
    if dropped:
        warnings.warn(f"{dropped} probe(s) have no gallery positive and are excluded", RuntimeWarning)
    if not out:
        raise EvalError("no probe has a positive in the gallery")
    return out


def rank_retrieval(scores, ks=(1, 5, 10), exclude_self=True):
    ranked = _ranked(scores, exclude_self)
    first = np.array([int(np.argmax(m)) for m in ranked])
    return {int(k): float(np.mean(first < k)) for k in ks}


def _ap_inp(match):
    pos = np.flatnonzero(match) + 1  # 1-based ranks of the positives
    ap = float(np.mean(np.arange(1, len(pos) + 1) / pos))
    inp = len(pos) / float(pos[-1])
    return ap, inp


def mean_average_precision(scores, exclude_self=True):
    return float(np.mean([_ap_inp(m)[0] for m in _ranked(scores, exclude_self)]))


def mean_inp(scores, exclude_self=True):
    return float(np.mean([_ap_inp(m)[1] for m in _ranked(scores, exclude_self)]))


# -- verification ------------------------------------------------------------------------------
@dataclass
class RocCurve:
    thresholds: np.ndarray  # accept iff distance <= threshold; starts at -inf
    far: np.ndarray
    tar: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "far", "tar"])
            for t, f, r in zip(self.thresholds, self.far, self.tar):
                w.writerow(["%.17g" % t, "%.17g" % f, "%.17g" % r])


def pair_scores(scores, exclude_self=True):
    """Genuine and impostor distances over all probe x gallery cross pairs."""
    excl = _self_mask(scores) if exclude_self else np.zeros(scores.dist.shape, dtype=bool)
    same = scores.probe_labels[:, None] == scores.gallery_labels[None, :]
    return scores.dist[same & ~excl], scores.dist[~same & ~excl]


def roc_curve(genuine, impostor):
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise EvalError(f"need genuine and impostor pairs, got {genuine.size} and {impostor.size}")
    th = np.unique(np.concatenate([genuine, impostor]))
    g = np.sort(genuine)
    im = np.sort(impostor)
    tar = np.searchsorted(g, th, side="right") / g.size
    far = np.searchsorted(im, th, side="right") / im.size
    return RocCurve(np.concatenate([[-np.inf], th]), np.concatenate([[0.0], far]), np.concatenate([[0.0], tar]))


def verification_roc(genuine, impostor, far_points=FAR_POINTS):
    """TAR at each target FAR using the loosest threshold whose FAR stays within target.

    Returns ``(tars, curve)``; a FAR point needing more impostor pairs than
    available maps to ``None``.
    """
    curve = roc_curve(genuine, impostor)
    n_imp = np.asarray(impostor).size
    tars = {}
    for f in far_points:
        if n_imp < MIN_IMPOSTORS.get(f, 0):
            tars[f] = None
            continue
        ok = np.flatnonzero(curve.far <= f + 1e-12)
        tars[f] = float(curve.tar[ok[-1]])
    return tars, curve


# -- bundles -----------------------------------------------------------------------------------
def evaluate(probe, gallery, exclude_self=True, far_points=FAR_POINTS):
    """Everything the metrics JSON holds, plus the ROC curve."""
    scores = euclidean_scores(probe, gallery)
    ranks = rank_retrieval(scores, (1, 5, 10), exclude_self)
    gen, imp = pair_scores(scores, exclude_self)
    tars, curve = verification_roc(gen, imp, far_points)
    metrics = {
        "rank1": ranks[1], "rank5": ranks[5], "rank10": ranks[10],
        "mAP": mean_average_precision(scores, exclude_self),
        "mINP": mean_inp(scores, exclude_self),
        "tar": {_far_key(f): v for f, v in tars.items()},
        "n_probe": len(probe), "n_gallery": len(gallery),
        "n_genuine": int(gen.size), "n_impostor": int(imp.size),
    }
    return metrics, curve


def _far_key(f):
    return "%g" % f


def metrics_json(metrics):
    return json.dumps(metrics, indent=1, sort_keys=True)
