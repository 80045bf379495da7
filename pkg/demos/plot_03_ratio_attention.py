"""
Ratio attention on an untrained model
=====================================

The recognizer gates its first-block features by a per-frame weight
computed from the box-size ratios. Forcing the weight to one recovers the
plain backbone exactly; zero wipes the clip.
"""

import numpy as np

from gader import gar, silio, synth

cfg = gar.GarConfig.desk()
store = gar.init_gar(cfg, seed=0)

walker = synth.sample_identity(3, np.random.default_rng(3))
lateral = synth.make_script([synth.Segment("walk", 60)], base_scale=0.75, drift=0.0)
approach = synth.make_script([synth.Segment("walk", 60)], base_scale=0.75, drift=0.004)

for name, script in (("constant size", lateral), ("approaching", approach)):
    sil, _, _ = synth.generate_sequence(walker, script, seed=0, with_rgb=False)
    norm, ratios = silio.normalize(sil)
    r = gar.ratio_attention(ratios.values, store, cfg).data.ravel()
    print("%-14s r: first %.3f last %.3f spread %.4f" % (name, r[0], r[-1], np.ptp(r)))

###############################################################################
norm, ratios = silio.normalize(synth.generate_sequence(walker, lateral, seed=0, with_rgb=False)[0])
e_one, _ = gar.embed(norm, ratios, store, cfg, r_override=1.0)
e_plain, _ = gar.embed(norm, ratios, store, gar.GarConfig.desk(use_ratio=False))
print("r = 1 equals plain backbone:", e_one.tobytes() == e_plain.tobytes())

e_zero, _ = gar.embed(norm, ratios, store, cfg, r_override=0.0)
e_blank, _ = gar.embed(np.zeros_like(norm.masks), ratios, store, cfg)
print("r = 0 equals blank clip:", np.array_equal(e_zero, e_blank))
