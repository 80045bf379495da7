"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The training-backed criteria (4, 6, 7) take several minutes each on one CPU core.
"""
import json
import os
import time
import zlib

import numpy as np
import pytest

from gader import cli
from gader import detector as D
from gader import evalkit as E
from gader import gar as G
from gader.dhs import autocorrelation, extract_dhs, mean_width
from gader.silio import normalize
from gader.synth import Segment, generate_corpus, generate_sequence, make_script, sample_identity
from gader.tensor import Tensor
from gader.tensor.functional import triplet_loss_batch_all
from gader.tensor.gradcheck import gradcheck

from gar_check import gar_gradcheck
from oracles import merge_oracle, nms_oracle, ranks_oracle, tar_oracle, triplet_oracle
from op_catalog import OPS

pytestmark = pytest.mark.slow


# -- 1 -----------------------------------------------------------------------------------------
def test_criterion_1_gradients(accept):
    t0 = time.time()
    worst = {}
    for name, (make, fn) in sorted(OPS.items()):
        rng = np.random.default_rng(zlib.crc32(b"acc-" + name.encode()))
        worst[name] = max(gradcheck(fn, make(rng), rng, eps=1e-6, max_coords=25) for _ in range(20))
    model = max(gar_gradcheck(s, n_params=20) for s in range(2))
    took = time.time() - t0
    op, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err <= 1e-4 and model <= 1e-4 and took <= 120
    accept(1, ok, f"{len(worst)} ops x 20 trials, worst {op} {err:.1e}; model {model:.1e}; {took:.0f}s")
    assert ok


# -- 2 -----------------------------------------------------------------------------------------
def _pred(s, n, c):
    return D.WindowPrediction(s, n, 1, c)


def test_criterion_2_oracles(accept):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    n = 500
    bad = {"nms": 0, "merge": 0, "triplet": 0, "ranks": 0, "roc": 0}
    for _ in range(n):
        wins = [(int(rng.integers(0, 80)), int(rng.integers(1, 50)), float(rng.choice([0.5, 0.6, 0.7, 0.9])))
                for _ in range(int(rng.integers(0, 12)))]
        thr = float(rng.choice([0.0, 0.3, 0.5, 0.7]))
        kept = [(p.start, p.length, p.confidence) for p in D.nms_1d([_pred(*w) for w in wins], thr)]
        bad["nms"] += kept != [wins[i] for i in nms_oracle(wins, thr)]

        ivs = sorted((int(s), int(s + rng.integers(1, 30)), float(rng.uniform()))
                     for s in rng.integers(0, 150, int(rng.integers(0, 10))))
        gap = int(rng.integers(1, 15))
        got = D.merge_intervals(ivs, gap)
        ref = merge_oracle(ivs, gap)
        bad["merge"] += [(s, e) for s, e, _ in got] != [(s, e) for s, e, _ in ref] or \
            any(a[2] != b[2] for a, b in zip(got, ref))

        B = int(rng.integers(4, 10))
        y = rng.integers(0, 3, B)
        y[:2] = [0, 1]
        y[2] = y[int(rng.integers(0, 2))]  # at least one positive pair and one negative
        e = rng.normal(size=(B, int(rng.integers(1, 5))))
        bad["triplet"] += abs(float(triplet_loss_batch_all(Tensor(e), y, 0.2).data) - triplet_oracle(e, y, 0.2)) > 1e-10

        n_p, n_g = int(rng.integers(1, 8)), int(rng.integers(2, 12))
        glab = rng.integers(0, 4, n_g)
        plab = glab[rng.integers(0, n_g, n_p)]
        dist = rng.integers(0, 6, (n_p, n_g)).astype(float) + rng.choice([0, 0.5], (n_p, n_g))
        sm = E.ScoreMatrix(dist, plab, glab)
        ranks, ap, inp = ranks_oracle(dist, plab, glab, (1, 5, 10))
        bad["ranks"] += (E.rank_retrieval(sm) != ranks or abs(E.mean_average_precision(sm) - ap) > 1e-10
                         or abs(E.mean_inp(sm) - inp) > 1e-10)

        gen = list(rng.integers(0, 15, int(rng.integers(1, 25))).astype(float))
        imp = list(rng.integers(0, 15, int(rng.integers(1, 80))).astype(float))
        tars, _ = E.verification_roc(gen, imp, (1e-2, 5e-2, 0.1, 0.5))
        bad["roc"] += any(t != tar_oracle(gen, imp, f) for f, t in tars.items())
    took = time.time() - t0
    ok = not any(bad.values()) and took <= 120
    accept(2, ok, f"{n} instances each, mismatches { {k: int(v) for k, v in bad.items()} }; {took:.0f}s")
    assert ok


# -- 3 -----------------------------------------------------------------------------------------
def test_criterion_3_dhs_laws(accept):
    corpus = generate_corpus(20, 2, seed=33, styles=("walk", "stand"))
    const_ok, peaks = [], []
    for e in corpus.entries:
        sil, _, _ = corpus.sequence(e)
        img = extract_dhs(normalize(sil)[0])
        if e["style"] == "stand":
            const_ok.append(bool((img.data == img.data[:, :1]).all()))
        else:
            ac = autocorrelation(img.data, 30)
            # lags 8..30 span every generator cadence (16-28) but no half or double cycle
            peaks.append(8 + int(np.argmax(ac[8:31])) == corpus.identities[e["identity"]].cadence)
    wider = []
    for ident in corpus.identities.values():
        for mode in ("walk", "stand"):
            for seed in range(3):
                f, _, _ = generate_sequence(ident, make_script([Segment(mode, 40)]), seed=seed, with_rgb=False)
                p, _, _ = generate_sequence(ident, make_script([Segment(mode, 40, "partial")]), seed=seed,
                                            with_rgb=False)
                wider.append(mean_width(extract_dhs(normalize(p)[0])) > mean_width(extract_dhs(normalize(f)[0])))
    ok = all(const_ok) and all(peaks) and np.mean(wider) >= 0.95
    accept(3, ok, f"constant stand columns {sum(const_ok)}/{len(const_ok)}, cadence peaks {sum(peaks)}/{len(peaks)}, "
                  f"part wider than full {np.mean(wider):.3f} of {len(wider)} pairs")
    assert ok


# -- 4 -----------------------------------------------------------------------------------------
def _iou(a, b):
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]))
    return inter / (max(a[1], b[1]) - min(a[0], b[0]))


def test_criterion_4_detector(accept):
    corpus = generate_corpus(40, 6, seed=0, styles=("mixed", "mixed", "wsw", "walk", "stand", "mixed"),
                             test_fraction=0.25)
    cfg = D.DetectorConfig()
    t0 = time.time()
    res = D.train_detector(corpus, cfg, seed=0)
    took = time.time() - t0
    acc = res.heldout_accuracy[-1][1]
    correct, ious = [], []
    for e in corpus.entries_for("test"):
        sil, _, gt = corpus.sequence(e)
        norm, _ = normalize(sil)
        r = D.detect(res.store, norm, cfg)
        correct.append(D.score_detection(r.frame_mask(), gt.gait_mask[norm.frame_index])["sequence_correct"])
        if e["style"] == "wsw":
            fi = norm.frame_index
            pred = [(int(fi[s]), int(fi[t - 1]) + 1) for s, t, _ in r.intervals]
            for g in gt.gait_intervals:
                ious.append(max((_iou(g, p) for p in pred), default=0.0))
    seq = float(np.mean(correct))
    miou = float(np.mean(ious))
    ok = took <= 600 and acc >= 0.95 and seq >= 0.90 and miou >= 0.7
    accept(4, ok, f"train {took:.0f}s, held-out window acc {acc:.3f}, sequence correct {seq:.3f} "
                  f"({len(correct)} seqs), walk-stand-walk mean IoU {miou:.3f} ({len(ious)} intervals)")
    assert ok


# -- 5 -----------------------------------------------------------------------------------------
def test_criterion_5_distillation(accept):
    rng = np.random.default_rng(5)
    cfg = G.GarConfig.desk()
    store = G.init_gar(cfg, 1)
    B, T = 4, 30
    sil = (rng.uniform(size=(B, T, 64, 64)) > 0.6).astype(np.float32)
    rgb = rng.uniform(size=(B, T, 64, 64, 3)).astype(np.float32)
    rat = rng.uniform(0.4, 1.4, (B, T, 2))
    lab = np.array([0, 0, 1, 1])

    store.zero_grad()
    G.distill_loss(G.forward_dual(sil, rgb, rat, store, cfg), store, cfg).backward()
    rgb_zero = all(store[n].grad is None or not np.any(store[n].grad) for n in G.rgb_names(store))
    adapters_live = all(np.any(store[n].grad) for n in G.adapter_names(store) if n.endswith(".w"))

    nd = G.GarConfig.desk(lambda_distill=0.0)
    store.zero_grad()
    G.train_loss(sil, rgb, rat, lab, store, nd)[0].backward()
    adapters_zero = all(store[n].grad is None or not np.any(store[n].grad) for n in G.adapter_names(store))

    one = G.forward_dual(sil, None, rat, store, cfg, r_override=1.0, with_rgb=False).emb_sil.data
    plain = G.forward_dual(sil, None, rat, store, G.GarConfig.desk(use_ratio=False), with_rgb=False).emb_sil.data
    exact = one.tobytes() == plain.tobytes()
    ok = rgb_zero and adapters_live and adapters_zero and exact
    accept(5, ok, f"RGB grads zero under distillation alone: {rgb_zero}; adapter grads zero with no distillation: "
                  f"{adapters_zero}; r=1 bit-exact: {exact}")
    assert ok


# -- 6 and 7 share one CLI workspace --------------------------------------------------------
def _cli(*argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0, argv
    return code


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Corpus, detector, full recognizer and no-ratio-no-distill baseline, all via the CLI."""
    w = tmp_path_factory.mktemp("accept")
    times = {}
    _cli("synth-gen", "--out", w / "corpus", "--seed", 5)
    for name, argv in (
        ("detector", ["train-detector", "--corpus", w / "corpus", "--out", w / "det"]),
        ("gar", ["train-gar", "--corpus", w / "corpus", "--out", w / "gar"]),
        ("baseline", ["train-gar", "--corpus", w / "corpus", "--out", w / "base",
                      "--set", "gar.use_ratio=false", "--set", "gar.lambda_distill=0", "--set", "gar.lambda_f=0"]),
    ):
        t0 = time.time()
        _cli(*argv)
        times[name] = time.time() - t0
    e2e = {
        "det": ["--detector", w / "det", "--gar", w / "gar"],
        "nodet": ["--gar", w / "gar", "--no-detector"],
        "base": ["--detector", w / "det", "--gar", w / "base"],
    }
    for name, extra in e2e.items():
        _cli("e2e", "--corpus", w / "corpus", "--out", w / f"e2e_{name}", *extra)
    return w, times, e2e


def _metrics(path):
    return json.loads(open(path).read())


def test_criterion_6_recognition(workspace, accept):
    w, times, _ = workspace
    det, nodet, base = (_metrics(w / f"e2e_{n}" / "metrics.json") for n in ("det", "nodet", "base"))
    train_s = times["detector"] + times["gar"]
    tar = det["tar"]["0.01"]
    ok = (train_s <= 1200 and det["rank1"] >= 0.8 and tar is not None and tar >= 0.7
          and det["rank1"] > nodet["rank1"] and det["rank1"] >= base["rank1"])
    accept(6, ok, f"train {train_s:.0f}s; with detector rank-1 {det['rank1']:.3f} TAR@1e-2 {tar}; "
                  f"no detector rank-1 {nodet['rank1']:.3f}; no-ratio-no-distill baseline rank-1 "
                  f"{base['rank1']:.3f} (n_probe {det['n_probe']}, n_gallery {det['n_gallery']})")
    assert ok


MICRO = [
    "--set", "synth.identities=6", "--set", "synth.scripts=2", "--set", 'synth.styles=["walk","probe"]',
    "--set", "synth.test_fraction=0.5", "--set", "detector.channels=[4,8,8,8,8]", "--set", "detector.steps=6",
    "--set", "detector.batch=8", "--set", "detector.eval_every=3", "--set", "gar.n_blocks=2",
    "--set", "gar.channels=[4,8]", "--set", "gar.embedding_dim=8", "--set", "gar.stem_pool=8",
    "--set", "gar.P=3", "--set", "gar.K=2", "--set", "gar.steps=4", "--set", "gar.milestones=[2]",
]


def _snapshot(d):
    out = {}
    for root, _, files in os.walk(d):
        for f in files:
            if f != "run.log":
                p = os.path.join(root, f)
                with open(p, "rb") as fh:
                    out[os.path.relpath(p, d)] = fh.read()
    return out


def test_criterion_7_determinism(workspace, tmp_path, accept):
    w, _, e2e = workspace
    m = tmp_path / "micro"
    runs = {
        "synth-gen": ["synth-gen", "--out", m / "corpus", "--seed", 4, *MICRO],
        "dhs-export": ["dhs-export", m / "corpus", "--out", m / "pgm"],
        "train-detector": ["train-detector", "--corpus", m / "corpus", "--out", m / "det", *MICRO],
        "train-gar": ["train-gar", "--corpus", m / "corpus", "--out", m / "gar", *MICRO],
        "detect": ["detect", "--corpus", w / "corpus", "--detector", w / "det", "--out", m / "detect"],
        "embed": ["embed", "--corpus", w / "corpus", "--gar", w / "gar", "--detector", w / "det", "--out", m / "emb"],
        "eval": ["eval", "--embeddings", w / "e2e_det" / "embeddings.csv", "--out", m / "eval"],
        "e2e": ["e2e", "--corpus", w / "corpus", "--out", w / "e2e_det", *e2e["det"]],
        "e2e (training)": ["e2e", "--out", m / "e2e", "--no-detector", *MICRO],
    }
    same = {}
    for name, argv in runs.items():
        out = argv[argv.index("--out") + 1]
        if not os.path.exists(out):
            _cli(*argv)
        first = _snapshot(out)
        _cli(*argv)
        second = _snapshot(out)
        same[name] = first == second and bool(first)
    traces = [f for f in ("loss_trace.csv",) if (m / "gar" / f).exists()]
    ok = all(same.values()) and traces
    failed = [k for k, v in same.items() if not v]
    accept(7, ok, f"{sum(same.values())}/{len(same)} subcommands byte-identical on rerun"
                  + (f"; differing: {failed}" if failed else "") + " (loss traces and metrics.json included)")
    assert ok
