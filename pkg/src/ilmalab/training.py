"""Optimisation loops: baseline transducer training, ILMT and scoped ILMA."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import losses
from .numerics import Graph, Tensor
from .transducer import ModelConfig, Transducer

log = logging.getLogger(__name__)

Report = Callable[[dict], None]


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``model`` holds the last finite parameters."""

    def __init__(self, message: str, model: Transducer):
        super().__init__(message)
        self.model = model


class AdaptScope(enum.Enum):
    FULL_ILM = "ilm"
    PREDICTOR = "predictor"
    JOINER_NB = "joiner"

    @classmethod
    def parse(cls, text: "str | AdaptScope") -> "AdaptScope":
        if isinstance(text, cls):
            return text
        aliases = {"ilm": cls.FULL_ILM, "full": cls.FULL_ILM, "fullilm": cls.FULL_ILM,
                   "predictor": cls.PREDICTOR, "predictoronly": cls.PREDICTOR,
                   "joiner": cls.JOINER_NB, "joinernb": cls.JOINER_NB}
        try:
            return aliases[str(text).lower().replace("_", "").replace("-", "")]
        except KeyError:
            raise ConfigError(f"unknown adaptation scope {text!r}") from None

    @property
    def label(self) -> str:
        return {"ilm": "ILM", "predictor": "Predictor", "joiner": "Joiner"}[self.value]


def scope_masks(model: Transducer, scope: AdaptScope | None) -> dict[str, np.ndarray | None]:
    """Boolean update mask per trainable parameter; absent names stay frozen.

    ``None`` as a value means "update the whole tensor".  ``scope=None`` selects
    every parameter (baseline and ILMT training).
    """
    if scope is None:
        return {k: None for k in model.params}
    names = set(model.predictor_names())
    if scope is AdaptScope.PREDICTOR:
        return {k: None for k in model.params if k in names}
    v = model.vocab_size
    rows = np.zeros((v + 1, 1), dtype=bool)
    rows[:v] = True
    nb = {
        "joint.w_out": np.broadcast_to(rows, model["joint.w_out"].shape).copy(),
        "joint.b_out": rows[:, 0].copy(),
    }
    if scope is AdaptScope.JOINER_NB:
        return nb
    # full internal LM: predictor, predictor projection and the non-blank output rows
    masks: dict[str, np.ndarray | None] = {k: None for k in names}
    masks["joint.w_pred"] = None
    masks["joint.b_pred"] = None
    masks.update(nb)
    return masks


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "baseline"
    alpha: float = 1.0
    rho: float = 0.2
    scope: AdaptScope = AdaptScope.JOINER_NB
    lr: float = 1e-3
    lr_decay: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    epochs: int = 12
    batch_size: int = 16
    seed: int = 17
    dev_fraction: float = 0.1

    def validate(self) -> "TrainConfig":
        if self.stage not in ("baseline", "ilmt", "ilma"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        if self.alpha < 0.0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0.0 or self.clip_norm <= 0.0:
            raise ConfigError("lr must be >= 0 and clip_norm > 0")
        return self


class Adam:
    """Adaptive-moment update restricted to masked entries."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def update(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], masks: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, mask in masks.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p = params[name].data
            if mask is None:
                p -= step
            else:
                p[mask] -= step[mask]


def apply_masked_update(
    params: dict[str, Tensor], grads: dict[str, np.ndarray], masks: dict, optimizer: Adam, clip_norm: float
) -> float:
    """Clip in-scope gradients to ``clip_norm`` (global norm) and take one step.

    Returns the pre-clipping norm.
    """
    scoped = {}
    for name, mask in masks.items():
        g = grads.get(name)
        if g is None:
            continue
        scoped[name] = g if mask is None else np.where(mask, g, 0.0)
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in scoped.values()))
    if norm > clip_norm:
        factor = clip_norm / norm
        scoped = {k: g * factor for k, g in scoped.items()}
    optimizer.update(params, scoped, masks)
    return norm


def _as_pairs(data) -> list[tuple[np.ndarray, list[int]]]:
    out = []
    for item in data:
        if hasattr(item, "feats"):
            out.append((item.feats, list(item.tokens)))
        else:
            feats, tokens = item
            out.append((np.asarray(feats), list(tokens)))
    return out


def _batches(n: int, size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start : start + size]


def _grads(model: Transducer, masks: dict) -> dict[str, np.ndarray]:
    return {k: model[k].grad for k in masks if model[k].grad is not None}


def _fit_paired(
    pairs,
    cfg: TrainConfig,
    model: Transducer,
    alpha: float,
    dev_pairs=None,
    report: Report | None = None,
) -> Transducer:
    pairs = _as_pairs(pairs)
    if not pairs:
        raise ConfigError("empty training set")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    masks = scope_masks(model, None)
    model.requires_grad(masks)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    last_good = model.copy()
    for epoch in range(1, cfg.epochs + 1):
        e2e_sum = ilm_sum = 0.0
        tokens = 0
        for idx in _batches(len(pairs), cfg.batch_size, rng):
            batch = losses.collate([pairs[i][0] for i in idx], [pairs[i][1] for i in idx])
            model.zero_grad()
            with Graph() as g:
                combined, ilm = losses.batch_ilmt_loss(model, batch, alpha)
                if not math.isfinite(combined.value):
                    raise TrainingDiverged(f"non-finite loss in epoch {epoch}", last_good)
                g.backward(combined.total)
            apply_masked_update(model.params, _grads(model, masks), masks, opt, cfg.clip_norm)
            e2e_sum += sum(combined.per_utterance)
            ilm_sum += ilm.value if ilm is not None else 0.0
            tokens += combined.num_tokens
        opt.lr *= cfg.lr_decay
        if not all(np.all(np.isfinite(p.data)) for p in model.params.values()):
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}", last_good)
        last_good = model.copy()
        row = {"stage": cfg.stage, "epoch": epoch, "e2e_per_token": e2e_sum / max(tokens, 1),
               "ilm_per_token": ilm_sum / max(tokens, 1) if alpha > 0 else float("nan")}
        if dev_pairs is not None:
            dev = _as_pairs(dev_pairs)
            row["dev_e2e_per_token"] = evaluate_e2e(model, dev)
            row["dev_ilm_ppl"] = math.exp(losses.batch_ilm_loss(model, [y for _, y in dev]).per_token)
        if report is not None:
            report(row)
        log.info("%s", row)
    model.requires_grad([])
    return model


def evaluate_e2e(model: Transducer, pairs, batch_size: int = 64) -> float:
    """Per-token transducer loss over ``pairs`` (no gradients)."""
    pairs = _as_pairs(pairs)
    total, tokens = 0.0, 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        value = losses.batch_transducer_loss(model, losses.collate([p[0] for p in chunk], [p[1] for p in chunk]))
        total += value.value
        tokens += value.num_tokens
    return total / max(tokens, 1)


def train_baseline(
    train_pairs, cfg: TrainConfig, model_config: ModelConfig, dev_pairs=None, report: Report | None = None
) -> Transducer:
    """Minimise the transducer loss from a seeded initialisation."""
    cfg = replace(cfg, stage="baseline").validate()
    model = Transducer.init(model_config, cfg.seed)
    return _fit_paired(train_pairs, cfg, model, 0.0, dev_pairs, report)


def train_ilmt(
    train_pairs, cfg: TrainConfig, model_config: ModelConfig, dev_pairs=None, report: Report | None = None
) -> Transducer:
    """Minimise transducer loss + ``cfg.alpha`` x internal-LM loss on the same transcripts."""
    cfg = replace(cfg, stage="ilmt").validate()
    model = Transducer.init(model_config, cfg.seed)
    return _fit_paired(train_pairs, cfg, model, cfg.alpha, dev_pairs, report)


def ilm_snapshot(model: Transducer) -> Transducer:
    """Frozen deep copy of the predictor and joiner, the only parts the internal LM reads."""
    keep = model.predictor_names() + model.joiner_names()
    return Transducer(model.config, {k: Tensor(model[k].data.copy(), name=k) for k in keep})


def adapt_ilma(
    model: Transducer,
    adapt_text: Sequence[Sequence[int]],
    cfg: TrainConfig,
    dev_text: Sequence[Sequence[int]] | None = None,
    report: Report | None = None,
) -> Transducer:
    """Text-only adaptation of the internal LM within ``cfg.scope``.

    A frozen snapshot taken before the first update supplies the KLD targets.
    After every epoch the held-out cross-entropy is measured and the best
    epoch's parameters are returned.  ``model`` itself is not modified.
    """
    cfg = replace(cfg, stage="ilma").validate()
    corpus = [list(y) for y in adapt_text if len(y) > 0]
    if not corpus:
        raise ConfigError("empty adaptation corpus")
    if dev_text is None:
        n_dev = max(1, int(round(len(corpus) * cfg.dev_fraction))) if len(corpus) > 1 else 0
        corpus, dev_text = (corpus[:-n_dev], corpus[-n_dev:]) if n_dev else (corpus, corpus)
    dev_text = [list(y) for y in dev_text if len(y) > 0]

    reference = ilm_snapshot(model)
    adapted = model.copy()
    masks = scope_masks(adapted, cfg.scope)
    adapted.requires_grad(masks)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    best, best_ce = adapted.copy(), math.inf
    for epoch in range(1, cfg.epochs + 1):
        total, tokens = 0.0, 0
        for idx in _batches(len(corpus), cfg.batch_size, rng):
            batch = [corpus[i] for i in idx]
            adapted.zero_grad()
            with Graph() as g:
                loss = losses.batch_ilma_loss(adapted, batch, reference, cfg.rho)
                if not math.isfinite(loss.value):
                    raise TrainingDiverged(f"non-finite ILMA loss in epoch {epoch}", best)
                g.backward(loss.total)
            apply_masked_update(adapted.params, _grads(adapted, masks), masks, opt, cfg.clip_norm)
            total += loss.value
            tokens += loss.num_tokens
        opt.lr *= cfg.lr_decay
        dev = losses.batch_ilm_loss(adapted, dev_text)
        dev_ce = dev.per_token
        if dev_ce < best_ce:
            best, best_ce = adapted.copy(), dev_ce
        row = {"stage": "ilma", "epoch": epoch, "scope": cfg.scope.value, "rho": cfg.rho,
               "ilma_per_token": total / max(tokens, 1), "dev_ce": dev_ce, "dev_ppl": math.exp(dev_ce)}
        if report is not None:
            report(row)
        log.info("%s", row)
    best.requires_grad([])
    return best
