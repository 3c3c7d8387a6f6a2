"""Synthetic two-domain data.

The vocabulary is built from acoustically confusable pairs (``ba``/``pa``,
``da``/``ta``, ...).  Pair members have nearby feature prototypes, so the
acoustics alone leave some doubt and the model's learned token statistics
decide the close calls.

* Source domain: a bigram grammar over the whole vocabulary.  After every
  context one member of each pair is strongly preferred.
* Target domain: command templates with slots.  The fixed template tokens
  pick the pair member the source grammar disfavours in that context, which
  is where a source-trained model makes its mistakes.

Everything is a pure function of the seeds passed in.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .transducer import Vocab

CONSONANT_PAIRS = (("b", "p"), ("d", "t"), ("g", "k"), ("v", "f"), ("z", "s"), ("m", "n"), ("l", "r"), ("w", "y"))
VOWELS = ("a", "i", "o", "u", "e")


def paired_tokens(n_pairs: int = 15) -> tuple[str, ...]:
    """``2 * n_pairs`` syllables; tokens ``2k`` and ``2k+1`` form a confusable pair."""
    if not 1 <= n_pairs <= len(CONSONANT_PAIRS) * len(VOWELS):
        raise ValueError(f"n_pairs must be in [1, {len(CONSONANT_PAIRS) * len(VOWELS)}]")
    out = []
    for k in range(n_pairs):
        a, b = CONSONANT_PAIRS[k % len(CONSONANT_PAIRS)]
        vowel = VOWELS[k // len(CONSONANT_PAIRS)]
        out += [a + vowel, b + vowel]
    return tuple(out)


def default_vocab() -> Vocab:
    return Vocab(paired_tokens(15))


def _seed(*parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(p) for p in parts]))


# ---------------------------------------------------------------------------
# grammars
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BigramGrammar:
    """First-order Markov source; row ``V`` of ``table`` is the sentence-start context."""

    table: np.ndarray
    min_len: int = 3
    max_len: int = 8
    name: str = "source"

    def sample(self, rng: np.random.Generator) -> list[int]:
        length = int(rng.integers(self.min_len, self.max_len + 1))
        prev = self.table.shape[1]
        out = []
        for _ in range(length):
            prev = int(rng.choice(self.table.shape[1], p=self.table[prev]))
            out.append(prev)
        return out


@dataclass(frozen=True)
class TemplateGrammar:
    """Command templates; each slot is a tuple of allowed tokens, fixed positions are ints."""

    templates: tuple[tuple, ...]
    name: str = "target"

    @property
    def min_len(self) -> int:
        return min(len(t) for t in self.templates)

    @property
    def max_len(self) -> int:
        return max(len(t) for t in self.templates)

    def sample(self, rng: np.random.Generator) -> list[int]:
        tpl = self.templates[int(rng.integers(len(self.templates)))]
        while True:
            out = [int(x) if isinstance(x, (int, np.integer)) else int(x[rng.integers(len(x))]) for x in tpl]
            if all(a != b for a, b in zip(out, out[1:])):
                return out


DomainGrammar = BigramGrammar | TemplateGrammar


def source_grammar(
    vocab_size: int, seed: int, preference: float = 0.9, concentration: float = 0.5, min_len=3, max_len=8
) -> BigramGrammar:
    """Bigram table with gamma-distributed pair weights and a preferred member per pair.

    Immediate repeats are excluded so token boundaries stay audible.
    """
    rng = _seed(seed, 101)
    n_pairs = vocab_size // 2
    table = np.zeros((vocab_size + 1, vocab_size))
    for ctx in range(vocab_size + 1):
        weights = rng.gamma(concentration, size=n_pairs)
        favoured = rng.integers(0, 2, size=n_pairs)
        row = np.zeros(vocab_size)
        for p in range(n_pairs):
            row[2 * p + favoured[p]] = weights[p] * preference
            row[2 * p + 1 - favoured[p]] = weights[p] * (1.0 - preference)
        if ctx < vocab_size:
            row[ctx] = 0.0
        table[ctx] = row / row.sum()
    return BigramGrammar(table, min_len, max_len)


def target_grammar(
    vocab_size: int,
    seed: int,
    n_templates: int = 20,
    n_slots: int = 2,
    slot_size: int = 6,
    min_len=4,
    max_len=7,
    against: BigramGrammar | None = None,
) -> TemplateGrammar:
    """Command templates with ``n_slots`` open positions each.

    When ``against`` is given, every fixed token following a fixed token (or
    the sentence start) is the member of its pair that ``against`` disfavours
    in that context, so a model steeped in the source statistics is pulled
    towards the wrong member.
    """
    rng = _seed(seed, 202)
    templates = []
    for _ in range(n_templates):
        length = int(rng.integers(min_len, max_len + 1))
        slots = set(rng.choice(length, size=min(n_slots, length), replace=False).tolist())
        tpl: list = []
        for pos in range(length):
            if pos in slots:
                tpl.append(tuple(int(t) for t in rng.choice(vocab_size, size=slot_size, replace=False)))
                continue
            prev = tpl[-1] if tpl else vocab_size
            prev = prev if isinstance(prev, int) else None
            tok = int(rng.integers(vocab_size))
            while tok == prev:
                tok = int(rng.integers(vocab_size))
            if against is not None and prev is not None:
                pair = (tok // 2) * 2
                members = [t for t in (pair, pair + 1) if t < vocab_size and t != prev]
                tok = min(members, key=lambda t: (against.table[prev, t], t))
            tpl.append(tok)
        templates.append(tuple(tpl))
    return TemplateGrammar(tuple(templates))


def generate_corpus(grammar: DomainGrammar, n_sentences: int, seed: int) -> list[list[int]]:
    if n_sentences < 1:
        raise ValueError("n_sentences must be >= 1")
    rng = _seed(seed, 303)
    return [grammar.sample(rng) for _ in range(n_sentences)]


class BigramModel:
    """Add-k smoothed bigram LM, used to measure domain shift."""

    def __init__(self, corpus: Iterable[Sequence[int]], vocab_size: int, k: float = 0.1):
        counts = np.full((vocab_size + 1, vocab_size), k)
        for y in corpus:
            prev = vocab_size
            for tok in y:
                counts[prev, tok] += 1
                prev = tok
        self.logp = np.log(counts / counts.sum(axis=1, keepdims=True))
        self.vocab_size = vocab_size

    def perplexity(self, corpus: Iterable[Sequence[int]]) -> float:
        nll, n = 0.0, 0
        for y in corpus:
            prev = self.vocab_size
            for tok in y:
                nll -= self.logp[prev, tok]
                prev = tok
                n += 1
        return math.exp(nll / n)


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureSeq:
    frames: np.ndarray  # (T, d)
    durations: tuple[int, ...]  # frames per token, sums to T

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class FeatureSynthesizer:
    """Per-token prototype vectors, repeated for 2-4 frames, plus Gaussian noise."""

    prototypes: np.ndarray
    min_frames: int = 2
    max_frames: int = 4
    sigma: float = 0.1

    @classmethod
    def build(
        cls,
        vocab_size: int,
        seed: int,
        dim: int = 8,
        min_offset: float = 0.1,
        max_offset: float = 0.6,
        sigma: float = 0.1,
        **kw,
    ):
        """Pairs share a random base vector; members sit apart along a random direction.

        Pair separations are spread geometrically over ``[min_offset, max_offset]``
        and shuffled, so a few pairs are nearly indistinguishable by ear while
        most are clear.
        """
        rng = _seed(seed, 404)
        n_pairs = (vocab_size + 1) // 2
        offsets = rng.permutation(np.geomspace(min_offset, max_offset, n_pairs)) if n_pairs > 1 else [max_offset]
        protos = np.zeros((vocab_size, dim))
        for p in range(n_pairs):
            base = rng.normal(0.0, 1.0, size=dim)
            direction = rng.normal(size=dim)
            direction /= np.linalg.norm(direction)
            protos[2 * p] = base + 0.5 * offsets[p] * direction
            if 2 * p + 1 < vocab_size:
                protos[2 * p + 1] = base - 0.5 * offsets[p] * direction
        return cls(protos, sigma=sigma, **kw)

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def token_frames(self, token: int, seed: int, position: int) -> np.ndarray:
        rng = _seed(seed, position, token, 505)
        k = int(rng.integers(self.min_frames, self.max_frames + 1))
        noise = rng.normal(0.0, 1.0, size=(k, self.dim)) * self.sigma
        return self.prototypes[token] + noise

    def synthesize(self, y: Sequence[int], seed: int) -> FeatureSeq:
        if len(y) == 0:
            raise ValueError("cannot synthesize features for an empty sequence")
        blocks = [self.token_frames(int(tok), seed, pos) for pos, tok in enumerate(y)]
        return FeatureSeq(np.concatenate(blocks, axis=0), tuple(len(b) for b in blocks))

    def nearest_prototype(self, feats: FeatureSeq) -> list[int]:
        """Invert :meth:`synthesize` given the segmentation (exact when ``sigma == 0``)."""
        out, start = [], 0
        for d in feats.durations:
            seg = feats.frames[start : start + d].mean(axis=0)
            out.append(int(np.argmin(((self.prototypes - seg) ** 2).sum(axis=1))))
            start += d
        return out


def synthesize_features(synth: FeatureSynthesizer, y: Sequence[int], seed: int) -> FeatureSeq:
    return synth.synthesize(y, seed)


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    seed: int = 17
    n_pairs: int = 15
    n_train: int = 2000
    n_adapt: int = 500
    n_target_test: int = 200
    n_source_test: int = 200
    n_source_dev: int = 200
    feat_dim: int = 8
    sigma: float = 0.1
    min_offset: float = 0.4
    max_offset: float = 0.4
    preference: float = 0.9
    concentration: float = 2.0
    n_templates: int = 20
    contrary_templates: bool = True


@dataclass
class Utterance:
    uid: str
    tokens: list[int]
    feats: np.ndarray


@dataclass
class Dataset:
    vocab: Vocab
    source_train: list[Utterance]
    source_test: list[Utterance]
    source_dev_text: list[list[int]]
    adapt_text: list[list[int]]
    target_test: list[Utterance]
    source: BigramGrammar | None = None  # generators are absent when loaded from disk
    target: TemplateGrammar | None = None
    synth: FeatureSynthesizer | None = None
    config: DataConfig = field(default_factory=DataConfig)


def _paired(prefix: str, corpus: list[list[int]], synth: FeatureSynthesizer, seed: int) -> list[Utterance]:
    return [
        Utterance(f"{prefix}-{i:05d}", y, synth.synthesize(y, seed * 1_000_003 + i).frames)
        for i, y in enumerate(corpus)
    ]


def build_dataset(cfg: DataConfig = DataConfig()) -> Dataset:
    """All splits from one master seed; adaptation text never repeats a test transcript."""
    vocab = Vocab(paired_tokens(cfg.n_pairs))
    v = vocab.size
    src = source_grammar(v, cfg.seed, preference=cfg.preference, concentration=cfg.concentration)
    tgt = target_grammar(v, cfg.seed, n_templates=cfg.n_templates, against=src if cfg.contrary_templates else None)
    synth = FeatureSynthesizer.build(v, cfg.seed, dim=cfg.feat_dim, min_offset=cfg.min_offset, max_offset=cfg.max_offset, sigma=cfg.sigma)

    train = generate_corpus(src, cfg.n_train, cfg.seed * 10 + 1)
    src_test = generate_corpus(src, cfg.n_source_test, cfg.seed * 10 + 2)
    src_dev = generate_corpus(src, cfg.n_source_dev, cfg.seed * 10 + 3)
    tgt_test = generate_corpus(tgt, cfg.n_target_test, cfg.seed * 10 + 4)
    held = {tuple(y) for y in tgt_test}
    adapt: list[list[int]] = []
    rng = _seed(cfg.seed * 10 + 5, 303)
    while len(adapt) < cfg.n_adapt:
        y = tgt.sample(rng)
        if tuple(y) not in held:
            adapt.append(y)

    return Dataset(
        vocab=vocab,
        source_train=_paired("src-train", train, synth, cfg.seed * 10 + 1),
        source_test=_paired("src-test", src_test, synth, cfg.seed * 10 + 2),
        source_dev_text=src_dev,
        adapt_text=adapt,
        target_test=_paired("tgt-test", tgt_test, synth, cfg.seed * 10 + 4),
        source=src,
        target=tgt,
        synth=synth,
        config=cfg,
    )


# ---------------------------------------------------------------------------
# text serialisation
# ---------------------------------------------------------------------------


def write_text(path: str | Path, corpus: Iterable[Sequence[int]], vocab: Vocab) -> None:
    lines = [" ".join(vocab.decode(y)) for y in corpus]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_text(path: str | Path, vocab: Vocab) -> list[list[int]]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        out.append(vocab.encode(line.split()))
    return out


def token_counts(corpus: Iterable[Sequence[int]]) -> Counter:
    return Counter(t for y in corpus for t in y)


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

_PAIRED = ("source_train", "source_test", "target_test")
_TEXT = ("source_dev_text", "adapt_text")


def save_dataset(data: Dataset, directory: str | Path) -> list[Path]:
    """Write every split: ``<split>.txt`` transcripts plus ``<split>.feats`` containers."""
    from .checkpoint import save_features

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = [directory / "vocab.txt"]
    written[0].write_text("\n".join(data.vocab.tokens) + "\n", encoding="utf-8")
    for name in _PAIRED:
        utts = getattr(data, name)
        write_text(directory / f"{name}.txt", [u.tokens for u in utts], data.vocab)
        save_features(directory / f"{name}.feats", {u.uid: u.feats for u in utts}, split=name)
        written += [directory / f"{name}.txt", directory / f"{name}.feats"]
    for name in _TEXT:
        write_text(directory / f"{name}.txt", getattr(data, name), data.vocab)
        written.append(directory / f"{name}.txt")
    return written


def load_dataset(directory: str | Path, cfg: DataConfig = DataConfig()) -> Dataset:
    """Inverse of :func:`save_dataset` (grammars and synthesizer are not stored)."""
    from .checkpoint import load_features

    directory = Path(directory)
    vocab = Vocab(tuple((directory / "vocab.txt").read_text(encoding="utf-8").split()))
    splits = {}
    for name in _PAIRED:
        feats = load_features(directory / f"{name}.feats")
        texts = read_text(directory / f"{name}.txt", vocab)
        if len(feats) != len(texts):
            raise ValueError(f"{name}: {len(feats)} feature entries but {len(texts)} transcripts")
        splits[name] = [Utterance(uid, y, x) for (uid, x), y in zip(feats.items(), texts)]
    for name in _TEXT:
        splits[name] = read_text(directory / f"{name}.txt", vocab)
    return Dataset(vocab=vocab, config=cfg, **splits)
