"""
Shallow fusion with an external LM, for comparison
===================================================

The classic alternative to adapting the model is to keep it fixed and add a
separately trained target-domain LM at decoding time: every token expansion
in beam search gains ``lam * log P_lm(token | prefix)``.  Blank expansions
get no LM term.  The adapted model from ILMA needs no extra network at
inference; fusion does.
"""

from ilmalab.corpus import DataConfig, build_dataset
from ilmalab.decoding import beam_search, corpus_ter, evaluate, train_external_lm
from ilmalab.training import TrainConfig, train_ilmt
from ilmalab.transducer import ModelConfig

data = build_dataset(DataConfig(n_pairs=6, n_train=600, n_adapt=200, n_target_test=60, n_source_test=60,
                                n_templates=8, min_offset=0.4, max_offset=0.4, concentration=2.0))
model_cfg = ModelConfig(vocab_size=data.vocab.size, enc_hidden=32, enc_layers=1, embed_dim=16,
                        pred_hidden=32, joint_dim=32)
model = train_ilmt(data.source_train, TrainConfig(epochs=15, lr=3e-3, alpha=1.0), model_cfg)
lm = train_external_lm(data.adapt_text, data.vocab.size, seed=17, epochs=10, lr=3e-3)
print(f"external LM perplexity on target test text: {lm.perplexity([u.tokens for u in data.target_test]):.2f}")

###############################################################################
# Sweep the LM weight.  ``lam = 0`` reproduces plain decoding exactly.

for lam in (0.0, 0.1, 0.2, 0.3, 0.5):
    ter = corpus_ter(evaluate(model, data.target_test, beam=5, lm=lm, lam=lam))
    print(f"lam={lam:.1f}  target TER {100 * ter:6.2f}%")

###############################################################################
# For a single beam the final score splits exactly into the transducer part
# and the weighted LM part.

best = beam_search(model, data.target_test[0].feats, beam=1, lm=lm, lam=0.3)[0]
print(f"score {best.log_score:.6f} = am {best.am_score:.6f} + 0.3 x lm {best.lm_score:.6f}")
