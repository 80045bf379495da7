"""
Finding the walking parts of a sequence
=======================================

Train the 4-class window classifier on a small synthetic corpus, then run
the sliding-window detector (confidence gate, NMS, gap merge) on an unseen
walk-stand-walk sequence. A few minutes on one core.
"""

import logging

import numpy as np

from gader import detector, silio, synth

logging.basicConfig(level=logging.INFO, format="%(message)s")

corpus = synth.generate_corpus(16, 4, seed=0, styles=("mixed", "wsw", "walk", "stand"))
cfg = detector.DetectorConfig(steps=400, eval_every=100, milestones=(300,))
res = detector.train_detector(corpus, cfg, seed=0)

###############################################################################
# A fresh identity the detector never saw
walker = synth.sample_identity(99, np.random.default_rng(99))
script = synth.make_script([synth.Segment("walk", 100), synth.Segment("stand", 100), synth.Segment("walk", 100)])
sil, _, gt = synth.generate_sequence(walker, script, seed=7, with_rgb=False)
norm, _ = silio.normalize(sil)

out = detector.detect(res.store, norm, cfg)
print("truth   ", gt.gait_intervals)
print("detected", [(s, e) for s, e, _ in out.intervals])
print("coverage %.2f usable %s" % (out.rho, out.usable))
print(detector.score_detection(out.frame_mask(), gt.gait_mask))

###############################################################################
# Pure standing gives nothing to recognize
stand, _, _ = synth.generate_sequence(walker, synth.make_script([synth.Segment("stand", 120)]), seed=8,
                                      with_rgb=False)
print("standing:", detector.detect(res.store, silio.normalize(stand)[0], cfg))
