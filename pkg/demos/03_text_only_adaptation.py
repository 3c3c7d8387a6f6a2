"""
Text-only adaptation of the internal LM (ILMA)
==============================================

An ILMT-trained transducer is adapted to a new domain using target-domain
*text only*: the internal LM is fine-tuned on it while a KL term, weighted by
``rho``, keeps its predictions close to a frozen copy of the pre-adaptation
internal LM.  Three parameter scopes are compared:

* ``ilm``       - predictor, predictor projection and non-blank output rows
* ``predictor`` - the prediction network only
* ``joiner``    - only the non-blank rows of the output layer, which leaves
  every blank logit untouched

The full-size version of this grid is ``ilmalab report``.
"""

import numpy as np

from ilmalab.corpus import DataConfig, build_dataset
from ilmalab.decoding import corpus_ter, evaluate
from ilmalab.training import AdaptScope, TrainConfig, adapt_ilma, train_ilmt
from ilmalab.transducer import ModelConfig

data = build_dataset(DataConfig(n_pairs=6, n_train=600, n_adapt=200, n_target_test=60, n_source_test=60,
                                n_templates=8, min_offset=0.4, max_offset=0.4, concentration=2.0))
model_cfg = ModelConfig(vocab_size=data.vocab.size, enc_hidden=32, enc_layers=1, embed_dim=16,
                        pred_hidden=32, joint_dim=32)
model = train_ilmt(data.source_train, TrainConfig(epochs=15, lr=3e-3, alpha=1.0), model_cfg)
unadapted = corpus_ter(evaluate(model, data.target_test))
print(f"unadapted ILMT model, target TER: {100 * unadapted:.2f}%")

###############################################################################
# Adapt in every scope for a few KLD weights.  No acoustic features are read:
# the adaptation path only runs the predictor and the joint network.
#
# The wider scopes move many more parameters per step; with a larger step
# size (try ``lr=3e-3``) the ILM and Predictor rows over-adapt badly, while
# the joiner scope stays close to the unadapted error rate.

rhos = (0.0, 0.2, 0.5, 0.8)
print(f"{'scope':10s}" + "".join(f"  rho={r:.1f}" for r in rhos))
for scope in AdaptScope:
    row = []
    for rho in rhos:
        adapted = adapt_ilma(model, data.adapt_text, TrainConfig(scope=scope, rho=rho, epochs=8))
        row.append(corpus_ter(evaluate(adapted, data.target_test)))
    print(f"{scope.label:10s}" + "".join(f"  {100 * t:7.2f}" for t in row))

###############################################################################
# The joiner scope only moves non-blank output rows, so the blank logit at
# any (frame, prefix) is bit-identical before and after adaptation.

adapted = adapt_ilma(model, data.adapt_text, TrainConfig(scope=AdaptScope.JOINER_NB, rho=0.2, epochs=8))
utt = data.target_test[0]
prefix = utt.tokens[:2]
before = [model.joint_logits(h, model.predict(prefix)[0]).data[model.blank_id] for h in model.encode(utt.feats)]
after = [adapted.joint_logits(h, adapted.predict(prefix)[0]).data[model.blank_id] for h in adapted.encode(utt.feats)]
print("blank logits identical after joiner-scope ILMA:", np.array_equal(before, after))
