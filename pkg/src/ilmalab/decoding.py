"""Decoding and evaluation: greedy and beam search, shallow fusion, perplexity, TER.

Decoding runs on plain numpy copies of the parameters; nothing here builds a
graph or touches gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import losses
from . import numerics as nx
from .numerics import Graph, Tensor
from .transducer import Transducer, glorot, rnn_layer

DEFAULT_BEAM = 5
DEFAULT_U_MAX = 10


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


class _Frozen:
    """Numpy views of the transducer weights with per-prefix caching."""

    def __init__(self, model: Transducer):
        p = {k: v.data for k, v in model.params.items()}
        self.model = model
        self.blank = model.blank_id
        self.embed = p["pred.embed"]
        self.w_in, self.w_rec, self.b = p["pred.w_in"], p["pred.w_rec"], p["pred.b"]
        self.w_pred, self.b_pred = p["joint.w_pred"], p["joint.b_pred"]
        self.w_out, self.b_out = p["joint.w_out"], p["joint.b_out"]
        self.act = np.tanh if model.config.activation == "tanh" else (lambda a: np.maximum(a, 0.0))
        start = p["pred.start"]
        self.cache: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray]] = {
            (): (start, start @ self.w_pred.T + self.b_pred)
        }

    def encoder_projection(self, x: np.ndarray) -> np.ndarray:
        p = self.model.params
        enc = self.model.encode(x).data
        return enc @ p["joint.w_enc"].data.T + p["joint.b_enc"].data

    def extend(self, parents: Sequence[tuple[int, ...]], tokens: Sequence[int]) -> list[tuple[int, ...]]:
        """Compute (and cache) predictor outputs for ``parent + (token,)``."""
        keys = [parent + (tok,) for parent, tok in zip(parents, tokens)]
        todo = [(k, parent, tok) for k, parent, tok in zip(keys, parents, tokens) if k not in self.cache]
        if todo:
            h_prev = np.stack([self.cache[parent][0] for _, parent, _ in todo])
            ids = np.array([tok for _, _, tok in todo])
            h = np.tanh(self.embed[ids] @ self.w_in.T + self.b + h_prev @ self.w_rec.T)
            proj = h @ self.w_pred.T + self.b_pred
            for i, (k, _, _) in enumerate(todo):
                self.cache[k] = (h[i], proj[i])
        return keys

    def joint_logprobs(self, enc_t: np.ndarray, prefixes: Sequence[tuple[int, ...]]) -> np.ndarray:
        proj = np.stack([self.cache[k][1] for k in prefixes])
        return _log_softmax_rows(self.act(enc_t + proj) @ self.w_out.T + self.b_out)


def decode_greedy(model: Transducer, x: np.ndarray, u_max: int = DEFAULT_U_MAX) -> list[int]:
    """Frame-synchronous argmax decoding.

    At each (frame, prefix) the argmax symbol is taken, ties going to blank
    and then to the lowest token id.  At most ``u_max`` tokens per frame.
    """
    fz = _Frozen(model)
    enc = fz.encoder_projection(x)
    prefix: tuple[int, ...] = ()
    for t in range(len(enc)):
        for _ in range(u_max):
            lp = fz.joint_logprobs(enc[t], [prefix])[0]
            k = int(np.argmax(lp[: fz.blank]))
            if lp[fz.blank] >= lp[k]:
                break
            prefix = fz.extend([prefix], [k])[0]
    return list(prefix)


# ---------------------------------------------------------------------------
# external LM for shallow fusion
# ---------------------------------------------------------------------------


class ExternalLM:
    """Stand-alone recurrent next-token model over the non-blank vocabulary."""

    def __init__(self, vocab_size: int, params: dict[str, Tensor]):
        self.vocab_size = vocab_size
        self.params = params
        self._cache: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray]] = {}

    @classmethod
    def init(cls, vocab_size: int, seed: int, embed_dim: int = 32, hidden: int = 64) -> "ExternalLM":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 9]))
        p = {
            "lm.embed": rng.normal(0.0, 0.1, size=(vocab_size, embed_dim)),
            "lm.w_in": glorot(rng, hidden, embed_dim),
            "lm.w_rec": glorot(rng, hidden, hidden),
            "lm.b": np.zeros(hidden),
            "lm.start": np.zeros(hidden),
            "lm.w_out": glorot(rng, vocab_size, hidden),
            "lm.b_out": np.zeros(vocab_size),
        }
        return cls(vocab_size, {k: Tensor(v, name=k) for k, v in p.items()})

    def log_probs_batch(self, ids: np.ndarray) -> Tensor:
        """``(B, U)`` padded ids to ``(B, U, V)`` next-token log-probs for each prefix."""
        p = self.params
        batch, u = ids.shape
        start = nx.add(Tensor(np.zeros((batch, p["lm.start"].shape[0]))), p["lm.start"])
        h = nx.reshape(start, (batch, 1, -1))
        if u > 1:
            emb = nx.gather_rows(p["lm.embed"], ids[:, : u - 1])
            h = nx.concat([h, rnn_layer(emb, p["lm.w_in"], p["lm.w_rec"], p["lm.b"], h0=start)], axis=1)
        logits = nx.add(nx.matmul(h, nx.transpose(p["lm.w_out"])), p["lm.b_out"])
        return nx.log_softmax(logits)

    def log_probs(self, prefix: Sequence[int]) -> np.ndarray:
        """Next-token log-distribution after ``prefix`` (numpy, cached)."""
        key = tuple(prefix)
        if key not in self._cache:
            p = {k: v.data for k, v in self.params.items()}
            if key:
                h_prev = self._state(key[:-1])
                h = np.tanh(p["lm.embed"][key[-1]] @ p["lm.w_in"].T + p["lm.b"] + h_prev @ p["lm.w_rec"].T)
            else:
                h = p["lm.start"]
            self._cache[key] = (h, _log_softmax_rows(h @ p["lm.w_out"].T + p["lm.b_out"]))
        return self._cache[key][1]

    def _state(self, key: tuple[int, ...]) -> np.ndarray:
        self.log_probs(key)
        return self._cache[key][0]

    def sequence_logprob(self, y: Sequence[int]) -> float:
        return float(sum(self.log_probs(y[:i])[tok] for i, tok in enumerate(y)))

    def perplexity(self, text: Sequence[Sequence[int]]) -> float:
        ids, lens = losses.pad_labels(text)
        lp = self.log_probs_batch(ids).data
        mask = np.arange(ids.shape[1])[None, :] < lens[:, None]
        picked = np.take_along_axis(lp, ids[..., None], axis=2)[..., 0]
        return math.exp(-float(picked[mask].sum()) / int(lens.sum()))

    def copy(self) -> "ExternalLM":
        return ExternalLM(self.vocab_size, {k: Tensor(v.data.copy(), name=k) for k, v in self.params.items()})


def train_external_lm(
    text: Sequence[Sequence[int]], vocab_size: int, seed: int, epochs: int = 10, batch_size: int = 16, lr: float = 1e-3
) -> ExternalLM:
    from .training import Adam, apply_masked_update

    lm = ExternalLM.init(vocab_size, seed)
    corpus = [list(y) for y in text if y]
    masks = {k: None for k in lm.params}
    for p in lm.params.values():
        p.requires_grad = True
    opt = Adam(lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
    for _ in range(epochs):
        order = rng.permutation(len(corpus))
        for start in range(0, len(corpus), batch_size):
            batch = [corpus[i] for i in order[start : start + batch_size]]
            ids, lens = losses.pad_labels(batch)
            target = losses.batch_ilma_targets(ids, lens, vocab_size, None, 0.0)
            for p in lm.params.values():
                p.zero_grad()
            with Graph() as g:
                loss = losses.soft_cross_entropy(lm.log_probs_batch(ids), target)
                g.backward(loss)
            grads = {k: p.grad for k, p in lm.params.items() if p.grad is not None}
            apply_masked_update(lm.params, grads, masks, opt, 5.0)
    for p in lm.params.values():
        p.requires_grad = False
    return lm


# ---------------------------------------------------------------------------
# beam search
# ---------------------------------------------------------------------------


@dataclass
class Hypothesis:
    labels: tuple[int, ...]
    log_score: float
    am_score: float = 0.0
    lm_score: float = 0.0

    def state(self, model: Transducer):
        """Predictor state for this hypothesis (recomputed from the labels)."""
        return model.predict(self.labels)[1]


def _merge(pool: dict, hyp: Hypothesis) -> None:
    old = pool.get(hyp.labels)
    if old is None:
        pool[hyp.labels] = hyp
        return
    total = float(np.logaddexp(old.log_score, hyp.log_score))
    pool[hyp.labels] = Hypothesis(hyp.labels, total, total - (hyp.log_score - hyp.am_score), hyp.lm_score)


def _rank_key(score: float, is_token: bool, labels: tuple[int, ...]):
    # blank children before token children on equal scores, then lexicographic labels
    return (-score, is_token, labels)


def beam_search(
    model: Transducer,
    x: np.ndarray,
    beam: int = DEFAULT_BEAM,
    lm: ExternalLM | None = None,
    lam: float = 0.0,
    u_max: int = DEFAULT_U_MAX,
) -> list[Hypothesis]:
    """Frame-synchronous transducer beam search; returns the final beam, best first.

    Within a frame the live hypotheses are expanded at most ``u_max`` times.
    Each expansion scores every child (blank closes the frame, a token stays
    in it) and keeps the ``beam`` best children.  Blank-closed hypotheses with
    identical labels are merged by log-sum-exp.  With an external LM, token
    children add ``lam * log P_lm(token | labels)``; blank gets no LM term.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    fz = _Frozen(model)
    enc = fz.encoder_projection(x)
    blank = fz.blank
    use_lm = lm is not None and lam != 0.0
    hyps = [Hypothesis((), 0.0)]
    for t in range(len(enc)):
        closed: dict[tuple[int, ...], Hypothesis] = {}
        live = hyps
        for step in range(u_max + 1):
            if not live:
                break
            lp = fz.joint_logprobs(enc[t], [h.labels for h in live])
            blank_scores = np.array([h.log_score for h in live]) + lp[:, blank]
            children = [(float(blank_scores[i]), False, h.labels, i, -1) for i, h in enumerate(live)]
            if step < u_max:
                am = lp[:, :blank]
                fused = am.copy()
                if use_lm:
                    fused = fused + lam * np.stack([lm.log_probs(h.labels) for h in live])
                tok_scores = np.array([h.log_score for h in live])[:, None] + fused
                flat = tok_scores.ravel()
                keep = min(beam, flat.size)
                cutoff = np.partition(flat, flat.size - keep)[flat.size - keep]
                for j in np.flatnonzero(flat >= cutoff):
                    i, k = divmod(int(j), blank)
                    children.append((float(flat[j]), True, live[i].labels + (k,), i, k))
            children.sort(key=lambda c: _rank_key(c[0], c[1], c[2]))
            survivors = children[:beam]
            next_live = []
            for score, is_token, labels, i, k in survivors:
                parent = live[i]
                if is_token:
                    am_step = float(lp[i, k])
                    lm_step = float(lm.log_probs(parent.labels)[k]) if use_lm else 0.0
                    next_live.append(Hypothesis(labels, score, parent.am_score + am_step,
                                                parent.lm_score + lm_step))
                else:
                    _merge(closed, Hypothesis(labels, score, parent.am_score + float(lp[i, blank]), parent.lm_score))
            if next_live:
                fz.extend([h.labels[:-1] for h in next_live], [h.labels[-1] for h in next_live])
            live = next_live
        hyps = sorted(closed.values(), key=lambda h: _rank_key(h.log_score, False, h.labels))[:beam]
    return hyps


def decode_beam(
    model: Transducer,
    x: np.ndarray,
    beam: int = DEFAULT_BEAM,
    lm: ExternalLM | None = None,
    lam: float = 0.0,
    u_max: int = DEFAULT_U_MAX,
) -> list[int]:
    return list(beam_search(model, x, beam, lm, lam, u_max)[0].labels)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def ilm_perplexity(model: Transducer, text: Sequence[Sequence[int]], batch_size: int = 256) -> float:
    """Token-level perplexity of the internal LM on ``text``."""
    corpus = [list(y) for y in text if len(y) > 0]
    if not corpus:
        raise ValueError("empty text")
    total, tokens = 0.0, 0
    for start in range(0, len(corpus), batch_size):
        value = losses.batch_ilm_loss(model, corpus[start : start + batch_size])
        total += value.value
        tokens += value.num_tokens
    return math.exp(total / tokens)


def token_error_rate(hyp: Sequence[int], ref: Sequence[int]) -> tuple[int, int]:
    """Levenshtein distance (unit costs) and reference length.

    An empty reference scores every hypothesis token as an insertion and
    contributes zero to the corpus reference length.
    """
    hyp, ref = list(hyp), list(ref)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1], len(ref)


@dataclass
class DecodeResult:
    uid: str
    reference: list[int]
    hypothesis: list[int]
    errors: int
    ref_len: int

    def tsv(self, vocab=None) -> str:
        fmt = (lambda ids: " ".join(vocab.decode(ids))) if vocab is not None else (lambda ids: " ".join(map(str, ids)))
        return f"{self.uid}\t{fmt(self.reference)}\t{fmt(self.hypothesis)}\t{self.errors}\t{self.ref_len}"


def corpus_ter(results: Sequence[DecodeResult]) -> float:
    errors = sum(r.errors for r in results)
    ref_len = sum(r.ref_len for r in results)
    return errors / ref_len if ref_len else float(errors > 0)


def evaluate(
    model: Transducer,
    utterances,
    beam: int = DEFAULT_BEAM,
    lm: ExternalLM | None = None,
    lam: float = 0.0,
    u_max: int = DEFAULT_U_MAX,
) -> list[DecodeResult]:
    """Decode ``utterances`` (objects with ``uid``, ``tokens``, ``feats``) in order."""
    out = []
    for utt in utterances:
        hyp = decode_beam(model, utt.feats, beam, lm, lam, u_max)
        errors, ref_len = token_error_rate(hyp, utt.tokens)
        out.append(DecodeResult(utt.uid, list(utt.tokens), hyp, errors, ref_len))
    return out
