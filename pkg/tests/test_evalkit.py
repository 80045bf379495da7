import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gader import evalkit as E

from oracles import ranks_oracle, tar_oracle


def _sm(dist, plab, glab, pid=None, gid=None):
    return E.ScoreMatrix(np.asarray(dist, float), np.asarray(plab), np.asarray(glab), pid, gid)


def test_gallery_equals_probes_rank1_is_one():
    rng = np.random.default_rng(0)
    es = E.EmbeddingSet([f"s{i}" for i in range(6)], [0, 0, 1, 1, 2, 2], ["c"] * 6, rng.normal(size=(6, 4)))
    sm = E.euclidean_scores(es, es)
    assert E.rank_retrieval(sm, (1,), exclude_self=False)[1] == 1.0


def test_self_match_excluded_by_seq_id():
    v = np.array([[0.0, 0], [5, 0], [0.1, 0]])
    es = E.EmbeddingSet(["a", "b", "c"], [0, 1, 1], ["x"] * 3, v)
    sm = E.euclidean_scores(es, es)
    with pytest.warns(RuntimeWarning, match="no gallery positive"):
        r = E.rank_retrieval(sm, (1,))
    # probe a has no other positive and is dropped; b's nearest other is c (same label)... c's nearest is a
    assert r[1] == pytest.approx(0.5)


def test_hand_built_rank1():
    dist = [[0.1, 0.5, 0.9, 0.3],
            [0.2, 0.1, 0.4, 0.8],
            [0.7, 0.6, 0.5, 0.1]]
    sm = _sm(dist, [0, 1, 2], [0, 2, 1, 2])
    # probe0 nearest gallery0 (label 0) ok; probe1 nearest gallery1 (label 2) miss; probe2 nearest gallery3 (label 2) ok
    assert E.rank_retrieval(sm, (1,))[1] == pytest.approx(2 / 3)


def test_ap_inp_hand_examples():
    sm = _sm([[0.1, 0.2, 0.3, 0.4]], [7], [7, 7, 1, 1])
    assert E.mean_average_precision(sm) == 1.0 and E.mean_inp(sm) == 1.0
    sm = _sm([[0.1, 0.2, 0.3, 0.4, 0.5]], [7], [1, 1, 7, 1, 1])
    assert E.mean_average_precision(sm) == pytest.approx(1 / 3)
    assert E.mean_inp(sm) == pytest.approx(1 / 3)


def test_ties_broken_by_gallery_index():
    sm = _sm([[1.0, 1.0]], [3], [3, 4])
    assert E.rank_retrieval(sm, (1,))[1] == 1.0
    sm = _sm([[1.0, 1.0]], [3], [4, 3])
    assert E.rank_retrieval(sm, (1,))[1] == 0.0


def _random_scores(rng):
    n_p, n_g = int(rng.integers(1, 8)), int(rng.integers(2, 12))
    glab = rng.integers(0, 4, n_g)
    plab = glab[rng.integers(0, n_g, n_p)]
    dist = rng.integers(0, 6, (n_p, n_g)).astype(float)  # coarse values force ties
    return _sm(dist, plab, glab)


def test_ranks_match_oracle():
    rng = np.random.default_rng(1)
    for _ in range(300):
        sm = _random_scores(rng)
        ranks, ap, inp = ranks_oracle(sm.dist, sm.probe_labels, sm.gallery_labels, (1, 5, 10))
        assert E.rank_retrieval(sm) == ranks
        assert abs(E.mean_average_precision(sm) - ap) <= 1e-12
        assert abs(E.mean_inp(sm) - inp) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metric_laws(seed):
    rng = np.random.default_rng(seed)
    sm = _random_scores(rng)
    r = E.rank_retrieval(sm)
    assert r[1] <= r[5] <= r[10]
    m, i = E.mean_average_precision(sm), E.mean_inp(sm)
    assert 0 < m <= 1 + 1e-12 and 0 < i <= 1 + 1e-12
    # strictly increasing transforms leave order statistics alone
    sm2 = _sm(np.exp(sm.dist) * 3 + 1, sm.probe_labels, sm.gallery_labels)
    assert E.rank_retrieval(sm2) == r
    gen, imp = E.pair_scores(sm)
    if gen.size and imp.size:
        g2, i2 = E.pair_scores(sm2)
        assert E.verification_roc(gen, imp)[0] == E.verification_roc(g2, i2)[0]


def test_roc_matches_oracle():
    rng = np.random.default_rng(2)
    for _ in range(200):
        gen = rng.integers(0, 20, int(rng.integers(1, 30))).astype(float)
        imp = rng.integers(0, 20, int(rng.integers(1, 60))).astype(float)
        tars, _ = E.verification_roc(gen, imp, (1e-3, 1e-2, 1e-1, 0.5))
        for f, t in tars.items():
            assert t == tar_oracle(list(gen), list(imp), f)


def test_roc_curve_shape():
    rng = np.random.default_rng(3)
    curve = E.roc_curve(rng.normal(size=50), rng.normal(size=80) + 1)
    assert curve.far[0] == 0 and curve.tar[0] == 0
    assert curve.far[-1] == 1 and curve.tar[-1] == 1
    assert (np.diff(curve.far) >= 0).all() and (np.diff(curve.tar) >= 0).all()


def test_separated_scores_full_tar():
    tars, _ = E.verification_roc(np.linspace(0, 1, 50), np.linspace(2, 3, 20_000))
    assert all(v == 1.0 for v in tars.values())


def test_chance_behaviour():
    rng = np.random.default_rng(4)
    tars, _ = E.verification_roc(rng.uniform(size=10_000), rng.uniform(size=10_000))
    for f, t in tars.items():
        assert abs(t - f) <= 4 * np.sqrt(f * (1 - f) / 10_000) + 2e-4


def test_far_1e4_needs_enough_impostors():
    tars, _ = E.verification_roc([0.1, 0.2], np.linspace(1, 2, 500))
    assert tars[1e-4] is None and tars[1e-2] == 1.0


def test_empty_pairs_error():
    with pytest.raises(E.EvalError):
        E.verification_roc([], [1.0])


def test_embedding_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    es = E.EmbeddingSet(["a", "b"], [3, 4], ["walk00-hue1", "probe02-hue9"], rng.normal(size=(2, 8)))
    E.save_embeddings(es, tmp_path / "e.csv")
    head = (tmp_path / "e.csv").read_text().splitlines()[0]
    assert head == "seq_id,identity,condition," + ",".join(f"e{i}" for i in range(8))
    back = E.load_embeddings(tmp_path / "e.csv")
    assert back.seq_ids == es.seq_ids and back.identities.tolist() == [3, 4]
    assert back.vectors.tobytes() == es.vectors.tobytes()


def test_embedding_set_rejects_nonfinite():
    with pytest.raises(E.EvalError):
        E.EmbeddingSet(["a"], [0], ["c"], [[np.nan, 1.0]])


def test_evaluate_bundle(tmp_path):
    rng = np.random.default_rng(6)
    g = E.EmbeddingSet([f"g{i}" for i in range(5)], range(5), ["walk00"] * 5, rng.normal(size=(5, 8)))
    p = E.EmbeddingSet([f"p{i}" for i in range(5)], range(5), ["probe02"] * 5, g.vectors + 0.01)
    m, curve = E.evaluate(p, g)
    assert m["rank1"] == 1.0 and m["mAP"] == 1.0 and m["tar"]["0.01"] == 1.0
    assert m["tar"]["0.0001"] is None
    doc = json.loads(E.metrics_json(m))
    assert set(doc) >= {"rank1", "rank5", "rank10", "mAP", "mINP", "tar"}
    assert set(doc["tar"]) == {"0.0001", "0.001", "0.01", "0.1"}
    curve.to_csv(tmp_path / "roc.csv")
    assert (tmp_path / "roc.csv").read_text().startswith("threshold,far,tar\n")
