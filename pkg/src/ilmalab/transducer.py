"""Transducer acoustic model: encoder, prediction network and joint network.

The joint network follows

    z[t, u] = W_j phi(W_e h_enc[t] + b_e + W_p h_pred[u] + b_p) + b_j

and the internal LM is the same network with the encoder branch (``W_e`` and
``b_e``) removed and the blank row of ``W_j``/``b_j`` dropped.  The blank
symbol is the last output index, so the non-blank rows are the contiguous
slice ``[:V]`` of the shared output weights.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

BLANK_SYMBOL = "<b>"


@dataclass(frozen=True)
class Vocab:
    """Non-blank tokens plus a blank id reserved at index ``len(tokens)``."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.tokens:
            raise ValueError("vocabulary must contain at least one token")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        if BLANK_SYMBOL in self.tokens:
            raise ValueError(f"{BLANK_SYMBOL!r} is reserved for blank")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def blank_id(self) -> int:
        return len(self.tokens)

    @property
    def output_dim(self) -> int:
        return len(self.tokens) + 1

    def encode(self, words: Iterable[str]) -> list[int]:
        lookup = {t: i for i, t in enumerate(self.tokens)}
        try:
            return [lookup[w] for w in words]
        except KeyError as err:
            raise ValueError(f"unknown token {err.args[0]!r}") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @classmethod
    def numbered(cls, n: int, prefix: str = "w") -> "Vocab":
        width = len(str(n - 1))
        return cls(tuple(f"{prefix}{i:0{width}d}" for i in range(n)))


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feat_dim: int = 8
    enc_hidden: int = 64
    enc_layers: int = 2
    subsample: int = 2
    embed_dim: int = 32
    pred_hidden: int = 64
    joint_dim: int = 64
    activation: str = "tanh"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DecoderState:
    """Predictor hidden vector after consuming ``prefix``."""

    hidden: Tensor
    prefix: tuple[int, ...] = ()


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def _check_tokens(ids: Sequence[int], vocab_size: int) -> None:
    for i in ids:
        if i == vocab_size:
            raise ValueError("blank id found in a label prefix")
        if not 0 <= i < vocab_size:
            raise ValueError(f"token id {i} outside vocabulary of size {vocab_size}")


def rnn_layer(x: Tensor, w_in: Tensor, w_rec: Tensor, b: Tensor, h0: Tensor | None = None) -> Tensor:
    """Elman tanh recurrence over axis 1 of a ``(B, T, in)`` batch; returns ``(B, T, H)``."""
    batch, steps = x.shape[0], x.shape[1]
    projected = nx.add(nx.matmul(x, nx.transpose(w_in)), b)
    w_rec_t = nx.transpose(w_rec)
    h = h0 if h0 is not None else Tensor(np.zeros((batch, w_rec.shape[0])))
    outs = []
    for t in range(steps):
        h = nx.tanh(nx.add(projected[:, t], nx.matmul(h, w_rec_t)))
        outs.append(h)
    return nx.stack(outs, axis=1)


class Transducer:
    """Parameter store plus the forward computations of the transducer."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.phi = nx.activation(config.activation)

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "Transducer":
        rng = np.random.default_rng(seed)
        c = config
        p: dict[str, np.ndarray] = {}
        in_dim = c.feat_dim * c.subsample
        for layer in range(c.enc_layers):
            p[f"enc.{layer}.w_in"] = glorot(rng, c.enc_hidden, in_dim)
            p[f"enc.{layer}.w_rec"] = glorot(rng, c.enc_hidden, c.enc_hidden)
            p[f"enc.{layer}.b"] = np.zeros(c.enc_hidden)
            in_dim = c.enc_hidden
        p["pred.embed"] = rng.normal(0.0, 0.1, size=(c.vocab_size, c.embed_dim))
        p["pred.w_in"] = glorot(rng, c.pred_hidden, c.embed_dim)
        p["pred.w_rec"] = glorot(rng, c.pred_hidden, c.pred_hidden)
        p["pred.b"] = np.zeros(c.pred_hidden)
        p["pred.start"] = np.zeros(c.pred_hidden)
        p["joint.w_enc"] = glorot(rng, c.joint_dim, c.enc_hidden)
        p["joint.b_enc"] = np.zeros(c.joint_dim)
        p["joint.w_pred"] = glorot(rng, c.joint_dim, c.pred_hidden)
        p["joint.b_pred"] = np.zeros(c.joint_dim)
        p["joint.w_out"] = glorot(rng, c.vocab_size + 1, c.joint_dim)
        p["joint.b_out"] = np.zeros(c.vocab_size + 1)
        return cls(config, {k: Tensor(v, name=k) for k, v in p.items()})

    def copy(self) -> "Transducer":
        return Transducer(self.config, {k: Tensor(v.data.copy(), name=k) for k, v in self.params.items()})

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def requires_grad(self, names: Iterable[str] | None = None) -> None:
        """Mark ``names`` (default: all) as trainable and freeze the rest."""
        wanted = set(self.params) if names is None else set(names)
        for k, p in self.params.items():
            p.requires_grad = k in wanted

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def blank_id(self) -> int:
        return self.config.vocab_size

    def encoder_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("enc.")]

    def predictor_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("pred.")]

    def joiner_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("joint.")]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    # -- encoder ---------------------------------------------------------------

    def frames_out(self, n_frames: int) -> int:
        return -(-n_frames // self.config.subsample)

    def _stack_frames(self, feats: np.ndarray) -> np.ndarray:
        """Pad the time axis to a multiple of ``subsample`` and fold frame pairs into features."""
        s = self.config.subsample
        batch, steps, dim = feats.shape
        if dim != self.config.feat_dim:
            raise ValueError(f"feature dim {dim} != configured {self.config.feat_dim}")
        padded_len = -(-steps // s) * s
        if padded_len != steps:
            feats = np.concatenate([feats, np.zeros((batch, padded_len - steps, dim))], axis=1)
        return feats.reshape(batch, padded_len // s, s * dim)

    def encode_batch(self, feats: np.ndarray) -> Tensor:
        """``(B, T, d)`` zero-padded features to ``(B, ceil(T/s), H)`` encoder states."""
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 3 or feats.shape[1] == 0:
            raise ValueError("encode needs at least one frame")
        h = Tensor(self._stack_frames(feats))
        for layer in range(self.config.enc_layers):
            h = rnn_layer(
                h,
                self.params[f"enc.{layer}.w_in"],
                self.params[f"enc.{layer}.w_rec"],
                self.params[f"enc.{layer}.b"],
            )
        return h

    def encode(self, x) -> Tensor:
        """``(T, d)`` features to ``(T', H)`` hidden states."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError("encode needs a non-empty (frames x dims) matrix")
        return self.encode_batch(x[None])[0]

    # -- prediction network ----------------------------------------------------

    def start_state(self) -> DecoderState:
        return DecoderState(self.params["pred.start"], ())

    def step(self, state: DecoderState, token: int) -> DecoderState:
        """Consume one non-blank token."""
        _check_tokens([token], self.vocab_size)
        p = self.params
        emb = nx.gather_rows(p["pred.embed"], [token])[0]
        pre = nx.add(nx.matmul(emb, nx.transpose(p["pred.w_in"])), p["pred.b"])
        h = nx.tanh(nx.add(pre, nx.matmul(state.hidden, nx.transpose(p["pred.w_rec"]))))
        return DecoderState(h, state.prefix + (int(token),))

    def predict(self, prefix: Sequence[int], state: DecoderState | None = None) -> tuple[Tensor, DecoderState]:
        """Feed ``prefix`` from ``state`` (default: sentence start); return ``(h_pred, new_state)``."""
        _check_tokens(prefix, self.vocab_size)
        state = self.start_state() if state is None else state
        for tok in prefix:
            state = self.step(state, tok)
        return state.hidden, state

    def predict_batch(self, ids: np.ndarray) -> Tensor:
        """``(B, U)`` padded labels to ``(B, U+1, H)`` outputs for prefixes of length 0..U."""
        p = self.params
        ids = np.asarray(ids, dtype=np.int64)
        batch = ids.shape[0]
        start = nx.add(Tensor(np.zeros((batch, self.config.pred_hidden))), p["pred.start"])
        if ids.shape[1] == 0:
            return nx.reshape(start, (batch, 1, self.config.pred_hidden))
        emb = nx.gather_rows(p["pred.embed"], ids)
        rest = rnn_layer(emb, p["pred.w_in"], p["pred.w_rec"], p["pred.b"], h0=start)
        return nx.concat([nx.reshape(start, (batch, 1, -1)), rest], axis=1)

    # -- joint network -----------------------------------------------------------

    def _out_rows(self, hidden: Tensor, rows: slice) -> Tensor:
        # row-wise products keep each logit independent of how many rows are evaluated
        w = self.params["joint.w_out"][rows]
        b = self.params["joint.b_out"][rows]
        return nx.add(nx.total(nx.mul(w, hidden), axis=1), b)

    def joint_logits(self, h_enc, h_pred) -> Tensor:
        """Full ``V+1`` logit vector for one (frame, prefix) pair."""
        p = self.params
        enc = nx.add(nx.matmul(h_enc, nx.transpose(p["joint.w_enc"])), p["joint.b_enc"])
        pred = nx.add(nx.matmul(h_pred, nx.transpose(p["joint.w_pred"])), p["joint.b_pred"])
        return self._out_rows(self.phi(nx.add(enc, pred)), slice(None))

    def ilm_logits(self, h_pred) -> Tensor:
        """Non-blank logits with the encoder branch and its bias removed."""
        p = self.params
        pred = nx.add(nx.matmul(h_pred, nx.transpose(p["joint.w_pred"])), p["joint.b_pred"])
        return self._out_rows(self.phi(pred), slice(0, self.vocab_size))

    def joint_batch(self, h_enc: Tensor, h_pred: Tensor) -> Tensor:
        """``(B, T', H)`` x ``(B, U+1, H)`` to ``(B, T', U+1, V+1)`` logits."""
        p = self.params
        enc = nx.add(nx.matmul(h_enc, nx.transpose(p["joint.w_enc"])), p["joint.b_enc"])
        pred = nx.add(nx.matmul(h_pred, nx.transpose(p["joint.w_pred"])), p["joint.b_pred"])
        b, t, j = enc.shape
        u = pred.shape[1]
        hidden = self.phi(nx.add(nx.reshape(enc, (b, t, 1, j)), nx.reshape(pred, (b, 1, u, j))))
        return nx.add(nx.matmul(hidden, nx.transpose(p["joint.w_out"])), p["joint.b_out"])

    def ilm_batch(self, h_pred: Tensor) -> Tensor:
        """``(B, U, H)`` predictor outputs to ``(B, U, V)`` internal-LM logits."""
        p = self.params
        v = self.vocab_size
        pred = nx.add(nx.matmul(h_pred, nx.transpose(p["joint.w_pred"])), p["joint.b_pred"])
        w_nb = p["joint.w_out"][:v]
        b_nb = p["joint.b_out"][:v]
        return nx.add(nx.matmul(self.phi(pred), nx.transpose(w_nb)), b_nb)

    # -- internal LM ---------------------------------------------------------------

    def ilm_step_logprobs(self, state: DecoderState) -> Tensor:
        return nx.log_softmax(self.ilm_logits(state.hidden))

    def ilm_sequence_logprob(self, y: Sequence[int]) -> float:
        """Sum of internal-LM log-probabilities of each token given its prefix."""
        if len(y) == 0:
            raise ValueError("empty token sequence")
        _check_tokens(y, self.vocab_size)
        state = self.start_state()
        logprob = 0.0
        for tok in y:
            logprob += float(self.ilm_step_logprobs(state).data[tok])
            state = self.step(state, tok)
        return logprob

    def ilm_logprob_step(self, token: int, prefix: Sequence[int]) -> float:
        _, state = self.predict(prefix)
        return float(self.ilm_step_logprobs(state).data[token])
