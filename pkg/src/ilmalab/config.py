"""INI-style experiment configuration.

Every key is optional; omitted keys fall back to the dataclass defaults.
A complete file with the shipped defaults is produced by
:func:`default_config_text`. Sections and keys:

``[data]``
    ``seed``, ``n_pairs``, ``n_train``, ``n_adapt``, ``n_target_test``,
    ``n_source_test``, ``n_source_dev``, ``feat_dim``, ``sigma``,
    ``min_offset``, ``max_offset``, ``preference``,
    ``concentration``, ``n_templates``, ``contrary_templates``.
``[model]``
    ``enc_hidden``, ``enc_layers``, ``subsample``, ``embed_dim``,
    ``pred_hidden``, ``joint_dim``, ``activation`` (``tanh`` or ``relu``).
    Vocabulary size and feature dimension follow ``[data]``.
``[train]`` and ``[ilma]``
    One :class:`~ilmalab.training.TrainConfig` each: ``alpha``, ``rho``,
    ``scope``, ``lr``, ``lr_decay``, ``beta1``, ``beta2``, ``eps``,
    ``clip_norm``, ``epochs``, ``batch_size``, ``seed``, ``dev_fraction``.
    ``[train]`` drives both the baseline and ILMT runs.
``[lm]``
    External LM for shallow fusion: ``epochs``, ``batch_size``, ``lr``.
``[decode]``
    ``beam``, ``u_max``, ``lam``.
``[report]``
    ``rhos``, ``scopes``, ``lams`` (comma-separated lists), ``fusion`` (bool).
``[paths]``
    ``data``: directory written by ``ilmalab gen``; when missing, corpora are
    regenerated in memory from ``[data] seed``.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .corpus import DataConfig, default_vocab
from .training import AdaptScope, ConfigError, TrainConfig
from .transducer import ModelConfig


class ConfigFileError(ConfigError):
    """Config parse failure carrying the offending line number (1-based, 0 if unknown)."""

    def __init__(self, message: str, line: int = 0, path: str = "<config>"):
        self.line = line
        self.path = path
        super().__init__(f"{path}:{line}: {message}" if line else f"{path}: {message}")


@dataclass(frozen=True)
class LMConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 5
    u_max: int = 10
    lam: float = 0.3


@dataclass(frozen=True)
class ReportConfig:
    rhos: tuple[float, ...] = (0.0, 0.2, 0.5, 0.8)
    scopes: tuple[str, ...] = ("ilm", "predictor", "joiner")
    lams: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5)
    fusion: bool = True


@dataclass(frozen=True)
class PathsConfig:
    data: str = ""


DEFAULT_TRAIN = TrainConfig(stage="baseline", epochs=40)
DEFAULT_ILMA = TrainConfig(stage="ilma", epochs=10)


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = DataConfig()
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab_size=default_vocab().size))
    train: TrainConfig = DEFAULT_TRAIN
    ilma: TrainConfig = DEFAULT_ILMA
    lm: LMConfig = LMConfig()
    decode: DecodeConfig = DecodeConfig()
    report: ReportConfig = ReportConfig()
    paths: PathsConfig = PathsConfig()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Apply a master seed to data generation and every training stage."""
        return replace(
            self,
            data=replace(self.data, seed=seed),
            train=replace(self.train, seed=seed),
            ilma=replace(self.ilma, seed=seed),
        )


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "ilma": TrainConfig,
    "lm": LMConfig,
    "decode": DecodeConfig,
    "report": ReportConfig,
    "paths": PathsConfig,
}
_HIDDEN = {"model": {"vocab_size", "feat_dim"}, "train": {"stage"}, "ilma": {"stage"}}


def _convert(kind, raw: str):
    if kind is bool or kind == "bool":
        low = raw.strip().lower()
        if low in {"1", "true", "yes", "on"}:
            return True
        if low in {"0", "false", "no", "off"}:
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    if kind in (AdaptScope, "AdaptScope"):
        return AdaptScope.parse(raw)
    if kind in ("tuple[float, ...]",):
        return tuple(float(v) for v in raw.split(",") if v.strip())
    if kind in ("tuple[str, ...]",):
        return tuple(AdaptScope.parse(v.strip()).value for v in raw.split(",") if v.strip())
    return raw.strip()


def _line_index(text: str) -> dict[tuple[str, str], int]:
    """Map (section, key) to the line where it is defined."""
    index, section = {}, ""
    for num, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if m := re.match(r"^\[([^\]]+)\]", stripped):
            section = m.group(1).strip().lower()
            index[(section, "")] = num
        elif stripped and stripped[0] not in "#;" and ("=" in stripped or ":" in stripped):
            key = re.split(r"[=:]", stripped, maxsplit=1)[0].strip().lower()
            index[(section, key)] = num
    return index


def parse_config(text: str, path: str = "<config>") -> ExperimentConfig:
    """Parse config text into an :class:`ExperimentConfig`.

    Raises:
        ConfigFileError: on syntax errors, unknown sections/keys or bad values,
            with the 1-based line number where the problem sits.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=path)
    except configparser.Error as err:
        line = getattr(err, "lineno", 0) or 0
        if isinstance(err, configparser.ParsingError) and err.errors:
            line = err.errors[0][0]
        if not line and (m := re.search(r"line (\d+)", str(err))):
            line = int(m.group(1))
        raise ConfigFileError(str(err).splitlines()[0], line, path) from None

    lines = _line_index(text)
    built = {}
    for section in parser.sections():
        name = section.lower()
        if name not in _SECTIONS:
            raise ConfigFileError(f"unknown section [{section}]", lines.get((name, ""), 0), path)
        types = {f.name: f.type for f in fields(_SECTIONS[name]) if f.name not in _HIDDEN.get(name, ())}
        values = {}
        for key, raw in parser.items(section):
            line = lines.get((name, key), 0)
            if key not in types:
                raise ConfigFileError(f"unknown key {key!r} in [{section}]", line, path)
            try:
                values[key] = _convert(types[key], raw)
            except (ValueError, ConfigError) as err:
                raise ConfigFileError(f"bad value for {key}: {err}", line, path) from None
        built[name] = (values, lines.get((name, ""), 0))

    def section(name, base):
        values, line = built.get(name, ({}, 0))
        return replace(base, **values), line

    data, _ = section("data", DataConfig())
    vocab_size = 2 * data.n_pairs
    model, model_line = section("model", ModelConfig(vocab_size=vocab_size))
    if model.activation not in ("tanh", "relu"):
        raise ConfigFileError(f"activation must be tanh or relu, got {model.activation!r}",
                              lines.get(("model", "activation"), model_line), path)
    cfg = ExperimentConfig(
        data=data,
        model=replace(model, vocab_size=vocab_size, feat_dim=data.feat_dim),
        train=section("train", DEFAULT_TRAIN)[0],
        ilma=section("ilma", DEFAULT_ILMA)[0],
        lm=section("lm", LMConfig())[0],
        decode=section("decode", DecodeConfig())[0],
        report=section("report", ReportConfig())[0],
        paths=section("paths", PathsConfig())[0],
    )
    for name in ("train", "ilma"):
        try:
            getattr(cfg, name).validate()
        except ConfigError as err:
            key = str(err).split()[0]
            line = lines.get((name, key), built.get(name, ({}, 0))[1])
            raise ConfigFileError(str(err), line, path) from None
    if cfg.decode.beam < 1:
        raise ConfigFileError("beam must be >= 1", lines.get(("decode", "beam"), 0), path)
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigFileError(f"cannot read config: {err.strerror}", 0, str(path)) from None
    return parse_config(text, str(path))


def _format(value) -> str:
    if isinstance(value, AdaptScope):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def default_config_text(cfg: ExperimentConfig | None = None) -> str:
    """Render a config as INI text that parses back to the same object."""
    cfg = cfg or ExperimentConfig()
    out = []
    for name in _SECTIONS:
        obj = getattr(cfg, name)
        out.append(f"[{name}]")
        for f in dataclasses.fields(obj):
            if f.name in _HIDDEN.get(name, ()):
                continue
            out.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        out.append("")
    return "\n".join(out)
