import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gader import synth
from gader.dhs import autocorrelation
from gader.silio import load_pack, normalize
from gader.synth import CLASSES, Segment, generate_corpus, generate_sequence, make_script


def test_stand_script_is_all_full_stand(walker):
    sil, rgb, gt = generate_sequence(walker, make_script([Segment("stand", 40)]), seed=1)
    assert sil.T == 40 and rgb.T == 40
    assert set(gt.labels.tolist()) == {synth.FULL_STAND}
    assert gt.walking_intervals == [] and gt.gait_intervals == []


def test_leg_tip_periodic_at_cadence(walker_cadence20):
    sil, _, _ = generate_sequence(walker_cadence20, make_script([Segment("walk", 60)]), seed=2, with_rgb=False)
    # bottom rows of the centroid-centred chips: the feet, with the body sway removed
    norm, _ = normalize(sil)
    feet = norm.masks[:, -6:, :].sum(axis=1).astype(float)  # (T, 64)
    ac = autocorrelation(feet.T, 30)
    others = [lag for lag in range(5, 31) if lag % 20]
    assert ac[20] > max(ac[lag] for lag in others)


def test_generation_is_deterministic(walker):
    script = make_script([Segment("walk", 30), Segment("stand", 10, "partial")], 0.8, 0.001)
    a = generate_sequence(walker, script, seed=5)
    b = generate_sequence(walker, script, seed=5)
    assert a[0].masks.tobytes() == b[0].masks.tobytes()
    assert a[1].frames.tobytes() == b[1].frames.tobytes()


def test_classes_follow_segments(walker):
    segs = [Segment("walk", 20), Segment("stand", 15, "partial"), Segment("walk", 10, "partial"), Segment("stand", 5)]
    _, _, gt = generate_sequence(walker, make_script(segs), seed=0, with_rgb=False)
    expect = [1] * 20 + [2] * 15 + [3] * 10 + [0] * 5
    assert gt.labels.tolist() == expect
    assert gt.walking_intervals == [(0, 20), (35, 45)]
    assert gt.gait_intervals == [(0, 20)]


def test_partial_body_cuts_legs(walker):
    full, _, _ = generate_sequence(walker, make_script([Segment("stand", 3)]), seed=0, with_rgb=False)
    part, _, _ = generate_sequence(walker, make_script([Segment("stand", 3, "partial")]), seed=0, with_rgb=False)
    assert part.raw_boxes[0, 2] < 0.7 * full.raw_boxes[0, 2]


def test_rgb_zero_outside_mask_and_in_range(walker):
    sil, rgb, _ = generate_sequence(walker, make_script([Segment("walk", 5)]), seed=0)
    assert rgb.frames.min() >= 0 and rgb.frames.max() <= 1
    assert np.all(rgb.frames[sil.masks == 0] == 0)


def test_too_small_frame_names_segment(walker):
    with pytest.raises(synth.GenerationError, match="segment 0"):
        generate_sequence(walker, make_script([Segment("walk", 5)], base_scale=1.0), frame_size=(40, 40))


def test_identity_invariants():
    with pytest.raises(ValueError):
        synth.WalkerIdentity(0, 10, 5, 10, 2, 0.3, 7, 1)
    with pytest.raises(ValueError):
        synth.WalkerIdentity(0, -1, 5, 10, 2, 0.3, 20, 1)
    rng = np.random.default_rng(0)
    ids = [synth.sample_identity(i, rng) for i in range(50)]
    fields = [tuple(v for k, v in w.__dict__.items() if k != "id") for w in ids]
    assert len(set(fields)) == 50


def test_script_invariants():
    s = make_script([Segment("walk", 10), Segment("stand", 5)], 0.8, 0.01)
    assert s.total == 15 and len(s.camera_scale_track) == 15
    assert s.bounds() == [(0, 10), (10, 15)]
    assert np.all(s.camera_scale_track[10:] == s.camera_scale_track[10])
    with pytest.raises(ValueError):
        Segment("walk", 0)


def test_corpus_two_identities():
    m = generate_corpus(2, 1, seed=0)
    assert len(m.entries) == 2
    assert {e["identity"] for e in m.entries} == {0, 1}
    assert set(m.split["train"]).isdisjoint(m.split["test"])


def test_corpus_counts():
    m = generate_corpus(20, 6, seed=1)
    assert len(m.entries) == 120
    counts = np.bincount([e["identity"] for e in m.entries])
    assert counts.tolist() == [6] * 20


def test_corpus_needs_two_identities():
    with pytest.raises(ValueError):
        generate_corpus(1, 3, seed=0)


def test_corpus_on_disk_is_reproducible(tmp_path):
    a = generate_corpus(3, 1, seed=7, out_dir=str(tmp_path / "a"), styles=("probe",), with_rgb=True)
    b = generate_corpus(3, 1, seed=7, out_dir=str(tmp_path / "b"), styles=("probe",), with_rgb=True)
    ma, mb = (tmp_path / "a" / "manifest.json").read_bytes(), (tmp_path / "b" / "manifest.json").read_bytes()
    assert ma == mb
    doc = json.loads(ma)
    for e in doc["entries"]:
        assert set(e) >= {"file", "identity", "condition", "segments"}
        assert (tmp_path / "a" / e["file"]).read_bytes() == (tmp_path / "b" / e["file"]).read_bytes()
    # the manifest alone regenerates the sequences bit-exactly
    e = a.entries[0]
    regen, _, _ = a.script_of(e), None, None
    sil, _, _ = generate_sequence(a.identities[e["identity"]], regen, a.frame_size, e["seed"], False)
    assert sil.masks.tobytes() == load_pack(str(tmp_path / "a" / e["file"])).masks.tobytes()


def test_manifest_json_roundtrip(tiny_corpus):
    back = synth.CorpusManifest.from_json(tiny_corpus.to_json())
    assert back.to_json() == tiny_corpus.to_json()


def test_corpus_covers_all_classes(tiny_corpus):
    seen = set()
    for e in tiny_corpus.entries:
        seen |= set(tiny_corpus.sequence(e)[2].labels.tolist())
    assert seen == set(range(len(CLASSES)))


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(synth.STYLES), st.integers(0, 10_000))
def test_random_scripts_render(style, seed):
    rng = np.random.default_rng(seed)
    ident = synth.sample_identity(seed, rng)
    script = synth.random_script(style, rng)
    assert 0.7 - 1e-9 <= script.camera_scale_track.min() and script.camera_scale_track.max() <= 1.05 + 1e-9
    sil, _, gt = generate_sequence(ident, script, seed=seed, with_rgb=False)
    assert sil.T == script.total == len(gt.labels)
    assert sil.masks.max() == 1
