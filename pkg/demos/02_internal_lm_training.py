"""
Internal language model: what ILMT changes
==========================================

Dropping the encoder branch and the blank row from the joint network leaves
a next-token model over the vocabulary: the internal LM.  Plain transducer
training leaves it poorly calibrated; adding its cross-entropy to the loss
(ILMT) turns it into a usable language model without hurting recognition.

This script trains both regimes on a reduced synthetic corpus and compares
internal-LM perplexity and token error rate.
"""

from ilmalab.corpus import DataConfig, build_dataset
from ilmalab.decoding import corpus_ter, evaluate, ilm_perplexity
from ilmalab.training import TrainConfig, train_baseline, train_ilmt
from ilmalab.transducer import ModelConfig

data = build_dataset(DataConfig(n_pairs=6, n_train=600, n_adapt=150, n_target_test=60, n_source_test=60,
                                n_source_dev=100, n_templates=8, min_offset=0.4, max_offset=0.4,
                                concentration=2.0))
print(f"vocabulary: {' '.join(data.vocab.tokens)}")
print("a source sentence :", " ".join(data.vocab.decode(data.source_dev_text[0])))
print("a target sentence :", " ".join(data.vocab.decode(data.adapt_text[0])))

model_cfg = ModelConfig(vocab_size=data.vocab.size, enc_hidden=32, enc_layers=1, embed_dim=16,
                        pred_hidden=32, joint_dim=32)
train_cfg = TrainConfig(epochs=15, lr=3e-3, alpha=1.0)


def show(row):
    print(f"  epoch {row['epoch']:2d}  e2e/token {row['e2e_per_token']:.3f}")


###############################################################################
# Same seed, same data, same schedule; only the loss differs.

print("baseline (transducer loss only)")
baseline = train_baseline(data.source_train, train_cfg, model_cfg, report=show)
print("ILMT (transducer loss + alpha x internal-LM loss)")
ilmt = train_ilmt(data.source_train, train_cfg, model_cfg, report=show)

###############################################################################
# The internal LM of the ILMT model is a far better language model of the
# source domain, while source-domain recognition stays comparable.

for name, model in (("baseline", baseline), ("ILMT", ilmt)):
    ppl = ilm_perplexity(model, data.source_dev_text)
    ter = corpus_ter(evaluate(model, data.source_test))
    print(f"{name:8s}  internal-LM perplexity {ppl:8.2f}   source TER {100 * ter:5.2f}%")
