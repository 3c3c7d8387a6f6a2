"""Training objectives.

* transducer negative log-likelihood over the (frames x labels) lattice,
* internal-LM cross-entropy on transcripts or adaptation text,
* the ILMT weighted sum of the two,
* the KLD-regularised ILMA loss, a cross-entropy against the mixture
  ``(1 - rho) * onehot(y_u) + rho * P_ref(. | prefix)``.

Each objective has a per-utterance form (used by tests and by the API
functions) and a padded-batch form used by the training loops.  Losses are
sums; :attr:`LossValue.per_token` is a reporting convenience.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .transducer import Transducer

log = logging.getLogger(__name__)

NEG_INF = -np.inf


class InfeasibleAlignment(ValueError):
    """No monotonic alignment exists (labels but no frames)."""


@dataclass
class LossValue:
    total: Tensor
    per_utterance: list[float] = field(default_factory=list)
    num_tokens: int = 0
    skipped: int = 0

    @property
    def value(self) -> float:
        return float(self.total.data)

    @property
    def per_token(self) -> float:
        return self.value / max(self.num_tokens, 1)


@dataclass
class PairedBatch:
    feats: np.ndarray  # (B, T, d) zero padded
    frame_lens: np.ndarray  # raw frames per utterance
    labels: np.ndarray  # (B, U) padded with 0
    label_lens: np.ndarray

    @property
    def size(self) -> int:
        return len(self.frame_lens)


def collate(features: Sequence[np.ndarray], transcripts: Sequence[Sequence[int]]) -> PairedBatch:
    n = len(features)
    t_max = max(len(f) for f in features)
    dim = features[0].shape[1]
    u_max = max((len(y) for y in transcripts), default=0)
    feats = np.zeros((n, t_max, dim))
    labels = np.zeros((n, u_max), dtype=np.int64)
    for i, (f, y) in enumerate(zip(features, transcripts)):
        feats[i, : len(f)] = f
        labels[i, : len(y)] = y
    return PairedBatch(
        feats,
        np.array([len(f) for f in features], dtype=np.int64),
        labels,
        np.array([len(y) for y in transcripts], dtype=np.int64),
    )


def pad_labels(corpus: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(y) for y in corpus], dtype=np.int64)
    ids = np.zeros((len(corpus), int(lens.max(initial=0))), dtype=np.int64)
    for i, y in enumerate(corpus):
        ids[i, : len(y)] = y
    return ids, lens


# ---------------------------------------------------------------------------
# transducer loss
# ---------------------------------------------------------------------------


def forward_backward(
    log_probs: np.ndarray,
    labels: np.ndarray,
    frame_lens: np.ndarray,
    label_lens: np.ndarray,
    blank: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Log-domain alpha/beta recursion over a padded batch.

    Args:
        log_probs: ``(B, T, U+1, K)`` output log-probabilities.
        labels: ``(B, U)`` padded targets.
        frame_lens: valid encoder frames per utterance.
        label_lens: valid labels per utterance.
        blank: blank index in the last axis.

    Returns:
        ``(nll, grad)`` with ``nll[b] = -log P(y_b | x_b)`` and ``grad`` its
        derivative with respect to ``log_probs``.
    """
    n, t_max, u1, _ = log_probs.shape
    u_max = u1 - 1
    if np.any(frame_lens < 1):
        raise InfeasibleAlignment("utterance with zero encoder frames")
    t_last = frame_lens - 1
    rows = np.arange(n)
    blank_lp = log_probs[..., blank]
    if u_max > 0:
        emit_lp = np.take_along_axis(log_probs[:, :, :u_max, :], labels[:, None, :, None], axis=3)[..., 0]

    alpha = np.full((n, t_max, u1), NEG_INF)
    alpha[:, 0, 0] = 0.0
    for t in range(t_max):
        if t > 0:
            alpha[:, t] = alpha[:, t - 1] + blank_lp[:, t - 1]
        for u in range(1, u1):
            alpha[:, t, u] = np.logaddexp(alpha[:, t, u], alpha[:, t, u - 1] + emit_lp[:, t, u - 1])
    log_like = alpha[rows, t_last, label_lens] + blank_lp[rows, t_last, label_lens]

    beta = np.full((n, t_max, u1), NEG_INF)
    for t in range(t_max - 1, -1, -1):
        outside = t > t_last
        for u in range(u_max, -1, -1):
            cand = np.full(n, NEG_INF)
            if t + 1 < t_max:
                cand = beta[:, t + 1, u] + blank_lp[:, t, u]
            if u < u_max:
                cand = np.logaddexp(cand, beta[:, t, u + 1] + emit_lp[:, t, u])
            cand = np.where((t_last == t) & (label_lens == u), blank_lp[:, t, u], cand)
            beta[:, t, u] = np.where(outside | (u > label_lens), NEG_INF, cand)

    after_blank = np.full((n, t_max, u1), NEG_INF)
    after_blank[:, :-1] = beta[:, 1:]
    after_blank[rows, t_last, label_lens] = 0.0
    norm = log_like[:, None, None]
    grad = np.zeros_like(log_probs)
    grad[..., blank] = -np.exp(alpha + blank_lp + after_blank - norm)
    if u_max > 0:
        g_emit = -np.exp(alpha[:, :, :u_max] + emit_lp + beta[:, :, 1:] - norm)
        sub = np.zeros(log_probs[:, :, :u_max].shape)
        np.put_along_axis(sub, labels[:, None, :, None], g_emit[..., None], axis=3)
        grad[:, :, :u_max] += sub
    return -log_like, grad


def transducer_nll(log_probs: Tensor, labels, frame_lens, label_lens, blank: int) -> Tensor:
    """Per-utterance ``-log P(y|x)`` as a graph op on top of ``log_probs``."""
    labels = np.asarray(labels, dtype=np.int64)
    frame_lens = np.asarray(frame_lens, dtype=np.int64)
    label_lens = np.asarray(label_lens, dtype=np.int64)
    nll, grad = forward_backward(log_probs.data, labels, frame_lens, label_lens, blank)
    return nx.custom("transducer_nll", [log_probs], nll, lambda g: (g[:, None, None, None] * grad,))


def batch_transducer_loss(model: Transducer, batch: PairedBatch) -> LossValue:
    enc = model.encode_batch(batch.feats)
    pred = model.predict_batch(batch.labels)
    log_probs = nx.log_softmax(model.joint_batch(enc, pred))
    frames = np.array([model.frames_out(int(t)) for t in batch.frame_lens])
    nll = transducer_nll(log_probs, batch.labels, frames, batch.label_lens, model.blank_id)
    return LossValue(nx.total(nll), [float(v) for v in nll.data], int(batch.label_lens.sum()))


def transducer_loss(model: Transducer, x: np.ndarray, y: Sequence[int]) -> LossValue:
    """``-log P(y | x)`` for a single utterance."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        if len(y) > 0:
            raise InfeasibleAlignment("labels with no frames")
        raise ValueError("empty feature sequence")
    return batch_transducer_loss(model, collate([x], [list(y)]))


# ---------------------------------------------------------------------------
# internal LM losses
# ---------------------------------------------------------------------------


def soft_cross_entropy(log_q: Tensor, target: np.ndarray) -> Tensor:
    """``-sum_v target[v] log_q[v]`` (summed over any leading axes too)."""
    return nx.scale(nx.total(nx.mul(log_q, target)), -1.0)


def _onehot(token: int, size: int) -> np.ndarray:
    out = np.zeros(size)
    out[token] = 1.0
    return out


def _sentence_loss(model: Transducer, y: Sequence[int], reference: Transducer | None, rho: float) -> Tensor:
    """Cross-entropy of one sentence, one prediction step at a time."""
    v = model.vocab_size
    state = model.start_state()
    ref_state = reference.start_state() if reference is not None else None
    loss = None
    for tok in y:
        target = _onehot(tok, v)
        if reference is not None:
            p_ref = np.exp(reference.ilm_step_logprobs(ref_state).data)
            target = (1.0 - rho) * target + rho * p_ref
            ref_state = reference.step(ref_state, tok)
        term = soft_cross_entropy(model.ilm_step_logprobs(state), target)
        loss = term if loss is None else nx.add(loss, term)
        state = model.step(state, tok)
    return loss


def _corpus_loss(model, corpus, reference, rho) -> LossValue:
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    total = None
    per, tokens, skipped = [], 0, 0
    for y in corpus:
        if len(y) == 0:
            skipped += 1
            continue
        term = _sentence_loss(model, y, reference, rho)
        per.append(float(term.data))
        tokens += len(y)
        total = term if total is None else nx.add(total, term)
    if skipped:
        log.warning("skipped %d empty sentence(s)", skipped)
    if total is None:
        total = Tensor(0.0)
    return LossValue(total, per, tokens, skipped)


def ilm_corpus_loss(model: Transducer, corpus: Sequence[Sequence[int]]) -> LossValue:
    """Negative internal-LM log-likelihood summed over sentences.

    Only the predictor and the non-blank path of the joiner enter the graph;
    encoder parameters never receive gradient.
    """
    return _corpus_loss(model, corpus, None, 0.0)


def check_rho(rho: float) -> None:
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")


def ilma_loss(
    model: Transducer, corpus: Sequence[Sequence[int]], reference: Transducer, rho: float
) -> LossValue:
    """KLD-regularised adaptation loss against a frozen reference model."""
    check_rho(rho)
    return _corpus_loss(model, corpus, reference, rho)


def kld_term(p_ref, log_q) -> float:
    """``KL(p_ref || q)`` for a reference distribution and log-probabilities ``log_q``."""
    p = np.asarray(p_ref, dtype=np.float64)
    lq = np.asarray(log_q, dtype=np.float64)
    if p.shape != lq.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {lq.shape}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("p_ref is not a normalised distribution")
    if not np.all(np.isfinite(lq)):
        raise ValueError("log_q must be finite")
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - lq[nz])))


def ilmt_loss(model: Transducer, x: np.ndarray, y: Sequence[int], alpha: float) -> LossValue:
    """Transducer loss plus ``alpha`` times the internal-LM loss of the transcript."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    e2e = transducer_loss(model, x, y)
    if alpha == 0.0 or len(y) == 0:
        return e2e
    ilm = ilm_corpus_loss(model, [y])
    total = nx.add(e2e.total, nx.scale(ilm.total, alpha))
    return LossValue(total, [float(total.data)], e2e.num_tokens)


# -- padded batch forms used for training -------------------------------------


def batch_ilm_log_probs(model: Transducer, ids: np.ndarray) -> Tensor:
    """``(B, U, V)`` internal-LM log-probabilities for every position of padded ``ids``."""
    pred = model.predict_batch(ids)
    u = ids.shape[1]
    return nx.log_softmax(model.ilm_batch(pred[:, :u]))


def _position_mask(lens: np.ndarray, width: int) -> np.ndarray:
    return (np.arange(width)[None, :] < lens[:, None]).astype(np.float64)


def batch_ilma_targets(
    ids: np.ndarray, lens: np.ndarray, vocab_size: int, reference: Transducer | None, rho: float
) -> np.ndarray:
    mask = _position_mask(lens, ids.shape[1])
    target = np.zeros(ids.shape + (vocab_size,))
    np.put_along_axis(target, ids[..., None], 1.0, axis=2)
    if reference is not None and rho > 0.0:
        p_ref = np.exp(batch_ilm_log_probs(reference, ids).data)
        target = (1.0 - rho) * target + rho * p_ref
    return target * mask[..., None]


def batch_ilma_loss(
    model: Transducer, corpus: Sequence[Sequence[int]], reference: Transducer | None, rho: float
) -> LossValue:
    """Padded-batch ILMA loss; ``reference=None`` or ``rho=0`` gives plain cross-entropy."""
    check_rho(rho)
    ids, lens = pad_labels(corpus)
    if ids.shape[1] == 0:
        return LossValue(Tensor(0.0), [0.0] * len(corpus), 0)
    target = batch_ilma_targets(ids, lens, model.vocab_size, reference, rho)
    log_q = batch_ilm_log_probs(model, ids)
    total = soft_cross_entropy(log_q, target)
    per = list(-(log_q.data * target).sum(axis=(1, 2)))
    return LossValue(total, per, int(lens.sum()))


def batch_ilm_loss(model: Transducer, corpus: Sequence[Sequence[int]]) -> LossValue:
    return batch_ilma_loss(model, corpus, None, 0.0)


def batch_ilmt_loss(model: Transducer, batch: PairedBatch, alpha: float) -> tuple[LossValue, LossValue | None]:
    """Returns ``(combined, ilm_part)``; the ILM term uses the batch's own transcripts."""
    e2e = batch_transducer_loss(model, batch)
    if alpha == 0.0:
        return e2e, None
    corpus = [batch.labels[i, : batch.label_lens[i]] for i in range(batch.size)]
    ilm = batch_ilm_loss(model, corpus)
    total = nx.add(e2e.total, nx.scale(ilm.total, alpha))
    return LossValue(total, e2e.per_utterance, e2e.num_tokens), ilm
