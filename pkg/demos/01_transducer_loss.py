"""
The transducer loss, by hand and by forward-backward
=====================================================

A transducer scores a transcript by summing over every way of interleaving
its tokens with blank symbols across the encoder frames.  This script builds
a tiny random model, enumerates those alignments explicitly, and checks the
log-domain forward-backward implementation and its gradient against them.
"""

import itertools
import math

import numpy as np

from ilmalab import losses
from ilmalab.numerics import Tensor, gradcheck
from ilmalab.transducer import ModelConfig, Transducer

config = ModelConfig(vocab_size=3, feat_dim=4, enc_hidden=6, enc_layers=1, embed_dim=4, pred_hidden=6, joint_dim=8)
model = Transducer.init(config, seed=0)
rng = np.random.default_rng(0)
x = rng.normal(size=(6, 4))  # six input frames -> three encoder frames after subsampling
y = [2, 0]

###############################################################################
# Every path through the (frame, label) lattice ends with a blank on the last
# frame.  With three frames and two labels there are C(4, 2) = 6 of them.

enc = model.encode(x).data
log_probs = np.empty((len(enc), len(y) + 1, config.vocab_size + 1))
for u in range(len(y) + 1):
    h_pred, _ = model.predict(y[:u])
    for t in range(len(enc)):
        z = model.joint_logits(Tensor(enc[t]), h_pred).data
        log_probs[t, u] = z - np.logaddexp.reduce(z)

paths = []
for emit_slots in itertools.combinations(range(len(enc) - 1 + len(y)), len(y)):
    t = u = 0
    score = 0.0
    for step in range(len(enc) - 1 + len(y)):
        if step in emit_slots:
            score += log_probs[t, u, y[u]]
            u += 1
        else:
            score += log_probs[t, u, model.blank_id]
            t += 1
    paths.append(score + log_probs[t, u, model.blank_id])

brute = -np.logaddexp.reduce(paths)
fast = losses.transducer_loss(model, x, y).value
print(f"alignments enumerated: {len(paths)}")
print(f"enumeration      : {brute:.15f}")
print(f"forward-backward : {fast:.15f}")
print(f"difference       : {abs(brute - fast):.2e}")

###############################################################################
# The gradient flows through a custom op that reuses the alpha/beta tables.
# Central differences on 20 random coordinates confirm it.

check = gradcheck(lambda: losses.transducer_loss(model, x, y).total, model.params, n_samples=20)
print(f"worst relative gradient error over {check.checked} coordinates: {check.max_rel_error:.2e}")

###############################################################################
# A model with all-zero weights is uniform over the four output symbols, so a
# single frame emitting one token costs exactly 2 ln 4.

zero = model.copy()
for p in zero.params.values():
    p.data[...] = 0.0
print(f"uniform single-frame loss: {losses.transducer_loss(zero, x[:1], [1]).value:.12f} "
      f"(2 ln 4 = {2 * math.log(4):.12f})")
