"""Text-only domain adaptation of transducer ASR models through the internal LM.

Modules:
    numerics: scratch-built reverse-mode autodiff on numpy arrays.
    transducer: encoder / predictor / joiner model and its internal LM.
    losses: transducer loss, internal-LM losses, ILMT and KLD-regularised ILMA.
    training: baseline / ILMT training and scoped ILMA adaptation.
    decoding: greedy and beam search, shallow fusion, perplexity, TER.
    corpus: synthetic two-domain data.
    checkpoint: bit-exact binary container for models and features.
    config, experiment, cli: orchestration.
"""

from .checkpoint import IntegrityError, VersionError, load_checkpoint, load_model, save_checkpoint
from .corpus import DataConfig, Dataset, build_dataset
from .decoding import ExternalLM, beam_search, corpus_ter, decode_beam, decode_greedy, evaluate, ilm_perplexity
from .losses import ilma_loss, ilmt_loss, transducer_loss
from .training import AdaptScope, ConfigError, TrainConfig, TrainingDiverged, adapt_ilma, train_baseline, train_ilmt
from .transducer import ModelConfig, Transducer, Vocab

__version__ = "0.1.0"

__all__ = [
    "AdaptScope",
    "ConfigError",
    "DataConfig",
    "Dataset",
    "ExternalLM",
    "IntegrityError",
    "ModelConfig",
    "TrainConfig",
    "TrainingDiverged",
    "Transducer",
    "VersionError",
    "Vocab",
    "adapt_ilma",
    "beam_search",
    "build_dataset",
    "corpus_ter",
    "decode_beam",
    "decode_greedy",
    "evaluate",
    "ilm_perplexity",
    "ilma_loss",
    "ilmt_loss",
    "load_checkpoint",
    "load_model",
    "save_checkpoint",
    "train_baseline",
    "train_ilmt",
    "transducer_loss",
]
