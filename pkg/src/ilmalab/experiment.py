"""The full adaptation grid: two training regimes x three scopes x KLD weights.

:func:`run_experiment` trains (or accepts) a baseline and an ILMT model,
adapts each with ILMA in every requested scope and regularisation weight,
decodes the target-domain test set and collects everything into an
:class:`ExperimentReport`, which renders as an aligned text table and as a
tab-separated twin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from .config import ExperimentConfig
from .corpus import Dataset, build_dataset
from .decoding import ExternalLM, corpus_ter, evaluate, ilm_perplexity, train_external_lm
from .training import AdaptScope, TrainingDiverged, adapt_ilma, train_baseline, train_ilmt
from .transducer import Transducer

REGIMES = ("baseline", "ilmt")
Progress = Callable[[str], None]


@dataclass
class Cell:
    """One adapted model: ``ter`` is None when the run failed (see ``error``)."""

    regime: str
    scope: str
    rho: float
    ter: float | None = None
    ilm_ppl: float | None = None
    error: str = ""

    @property
    def failed(self) -> bool:
        return self.ter is None


@dataclass
class ExperimentReport:
    seed: int
    rhos: tuple[float, ...]
    scopes: tuple[str, ...]
    unadapted: dict[str, float] = field(default_factory=dict)  # regime -> target TER
    source_ter: dict[str, float] = field(default_factory=dict)
    ppl: dict[str, tuple[float, float]] = field(default_factory=dict)  # model -> (source dev, target test)
    cells: dict[tuple[str, str, float], Cell] = field(default_factory=dict)
    fusion: dict[str, dict[float, float]] = field(default_factory=dict)  # regime -> lam -> TER

    def cell(self, regime: str, scope: str | AdaptScope, rho: float) -> Cell:
        return self.cells[(regime, AdaptScope.parse(scope).value, float(rho))]

    def ter(self, regime: str, scope: str | AdaptScope, rho: float) -> float | None:
        return self.cell(regime, scope, rho).ter

    def best(self, regime: str, scope: str | AdaptScope) -> float:
        """Lowest TER over the rho grid (inf when every cell failed)."""
        values = [self.ter(regime, scope, r) for r in self.rhos]
        return min((v for v in values if v is not None), default=math.inf)

    def relative_gain(self, regime: str, ter: float) -> float:
        base = self.unadapted[regime]
        return (base - ter) / base if base > 0 else 0.0

    def is_complete(self) -> bool:
        return all((r, AdaptScope.parse(s).value, float(rho)) in self.cells
                   for r in REGIMES for s in self.scopes for rho in self.rhos)

    # -- rendering -----------------------------------------------------------

    def render(self) -> str:
        """Aligned plain-text tables (TER in percent, two decimals)."""

        def pct(v: float | None) -> str:
            return "failed" if v is None else f"{100.0 * v:.2f}"

        header = ["regime", "ILMA scope"] + [f"rho={r:.1f}" for r in self.rhos]
        rows = []
        for regime in REGIMES:
            if regime not in self.unadapted:
                continue
            rows.append([regime, "-", pct(self.unadapted[regime])] + [""] * (len(self.rhos) - 1))
            for scope in self.scopes:
                label = AdaptScope.parse(scope).label
                mark = " [no ILMT]" if regime == "baseline" else ""
                rows.append([f"{regime}+ILMA{mark}", label] + [pct(self.ter(regime, scope, r)) for r in self.rhos])
        out = [f"Target-domain TER (%), seed {self.seed}", *_table(header, rows)]
        out.append("[no ILMT]: ILMA applied to a model trained without ILMT (not the recommended regime)")

        if self.source_ter:
            out += ["", "Source-domain TER (%)"]
            out += _table(["model", "TER"], [[k, pct(v)] for k, v in self.source_ter.items()])
        if self.ppl:
            out += ["", "Internal-LM perplexity"]
            out += _table(["model", "source dev", "target test"],
                          [[k, f"{a:.2f}", f"{b:.2f}"] for k, (a, b) in self.ppl.items()])
        if self.fusion:
            out += ["", "Shallow fusion with a target-domain external LM (target TER %)"]
            lams = sorted({lam for sweep in self.fusion.values() for lam in sweep})
            frows = []
            for regime, sweep in self.fusion.items():
                best = min(sweep, key=lambda k: (sweep[k], k))
                frows.append([regime] + [pct(sweep.get(lam)) for lam in lams] + [f"{best:g}"])
            out += _table(["regime"] + [f"lam={lam:g}" for lam in lams] + ["best lam"], frows)
        return "\n".join(out) + "\n"

    def tsv(self) -> str:
        """Machine-readable twin: one record per line, full float precision."""
        lines = ["kind\tregime\tscope\trho\tlam\tmetric\tvalue"]

        def num(v):
            return "nan" if v is None else repr(float(v))

        for regime, v in self.unadapted.items():
            lines.append(f"unadapted\t{regime}\t-\t-\t-\tter\t{num(v)}")
        for (regime, scope, rho), c in self.cells.items():
            lines.append(f"ilma\t{regime}\t{scope}\t{rho!r}\t-\tter\t{num(c.ter)}")
            lines.append(f"ilma\t{regime}\t{scope}\t{rho!r}\t-\tilm_ppl\t{num(c.ilm_ppl)}")
        for model, v in self.source_ter.items():
            lines.append(f"source\t{model}\t-\t-\t-\tter\t{num(v)}")
        for model, (a, b) in self.ppl.items():
            lines.append(f"ppl\t{model}\t-\t-\t-\tsource_dev\t{num(a)}")
            lines.append(f"ppl\t{model}\t-\t-\t-\ttarget_test\t{num(b)}")
        for regime, sweep in self.fusion.items():
            for lam, v in sweep.items():
                lines.append(f"fusion\t{regime}\t-\t-\t{lam!r}\tter\t{num(v)}")
        return "\n".join(lines) + "\n"

    def write(self, prefix: str | Path) -> tuple[Path, Path]:
        """Write ``<prefix>.txt`` and ``<prefix>.tsv``; returns both paths."""
        prefix = Path(prefix)
        txt, tsv = prefix.with_suffix(".txt"), prefix.with_suffix(".tsv")
        txt.write_text(self.render(), encoding="utf-8")
        tsv.write_text(self.tsv(), encoding="utf-8")
        return txt, tsv


def _table(header: list[str], rows: list[list[str]]) -> list[str]:
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return [fmt(header).rstrip(), "  ".join("-" * w for w in widths)] + [fmt(r).rstrip() for r in rows]


def train_models(
    cfg: ExperimentConfig, data: Dataset, progress: Progress | None = None, regimes=REGIMES
) -> dict[str, Transducer]:
    """Baseline (plain E2E loss) and ILMT models from the same seed and schedule."""
    models = {}
    for regime, fit in (("baseline", train_baseline), ("ilmt", train_ilmt)):
        if regime not in regimes:
            continue
        if progress:
            progress(f"training {regime}")
        models[regime] = fit(data.source_train, replace(cfg.train, stage=regime), cfg.model)
    return models


def run_grid(
    models: dict[str, Transducer],
    data: Dataset,
    cfg: ExperimentConfig,
    progress: Progress | None = None,
    fusion_lm: ExternalLM | None = None,
) -> ExperimentReport:
    """Adapt and decode every (regime, scope, rho) cell; failed cells are recorded, not raised."""
    rc, dc = cfg.report, cfg.decode
    report = ExperimentReport(seed=cfg.data.seed, rhos=tuple(float(r) for r in rc.rhos),
                              scopes=tuple(AdaptScope.parse(s).value for s in rc.scopes))
    target_text = [u.tokens for u in data.target_test]

    def ter(model, lm=None, lam=0.0, utts=None):
        return corpus_ter(evaluate(model, utts or data.target_test, dc.beam, lm, lam, dc.u_max))

    for regime in REGIMES:
        model = models[regime]
        report.unadapted[regime] = ter(model)
        report.source_ter[regime] = ter(model, utts=data.source_test)
        report.ppl[regime] = (ilm_perplexity(model, data.source_dev_text), ilm_perplexity(model, target_text))
        for scope in report.scopes:
            for rho in report.rhos:
                if progress:
                    progress(f"ILMA {regime} {scope} rho={rho:g}")
                cell = Cell(regime, scope, rho)
                try:
                    adapted = adapt_ilma(model, data.adapt_text, replace(cfg.ilma, scope=AdaptScope.parse(scope), rho=rho))
                    cell.ter = ter(adapted)
                    cell.ilm_ppl = ilm_perplexity(adapted, target_text)
                except (TrainingDiverged, FloatingPointError, ArithmeticError) as err:
                    cell.error = str(err)
                report.cells[(regime, scope, rho)] = cell

    if rc.fusion:
        lm = fusion_lm or train_external_lm(
            data.adapt_text, data.vocab.size, cfg.data.seed, cfg.lm.epochs, cfg.lm.batch_size, cfg.lm.lr
        )
        for regime in REGIMES:
            if progress:
                progress(f"shallow fusion {regime}")
            report.fusion[regime] = {float(lam): ter(models[regime], lm, lam) for lam in rc.lams}
    return report


def run_experiment(
    cfg: ExperimentConfig,
    progress: Progress | None = None,
    data: Dataset | None = None,
    models: dict[str, Transducer] | None = None,
) -> tuple[ExperimentReport, dict[str, Transducer], Dataset]:
    """Build data, train both regimes (unless given) and run the grid."""
    data = data or build_dataset(cfg.data)
    models = models or train_models(cfg, data, progress)
    return run_grid(models, data, cfg, progress), models, data
