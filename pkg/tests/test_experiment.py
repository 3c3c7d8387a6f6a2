import math
from dataclasses import replace

import pytest

from ilmalab import experiment
from ilmalab.config import ExperimentConfig, ReportConfig
from ilmalab.corpus import DataConfig
from ilmalab.experiment import Cell, ExperimentReport, run_grid
from ilmalab.training import TrainingDiverged

from conftest import SMALL_DATA


def filled_report() -> ExperimentReport:
    rep = ExperimentReport(seed=17, rhos=(0.0, 0.2), scopes=("ilm", "joiner"))
    rep.unadapted = {"baseline": 0.20, "ilmt": 0.25}
    rep.source_ter = {"baseline": 0.03, "ilmt": 0.04}
    rep.ppl = {"baseline": (40.0, 90.0), "ilmt": (12.0, 30.0)}
    values = {("baseline", "ilm"): (0.22, 0.19), ("baseline", "joiner"): (0.18, 0.17),
              ("ilmt", "ilm"): (0.21, 0.15), ("ilmt", "joiner"): (0.20, None)}
    for (regime, scope), ters in values.items():
        for rho, ter in zip(rep.rhos, ters):
            rep.cells[(regime, scope, rho)] = Cell(regime, scope, rho, ter, None if ter is None else 20.0,
                                                   "" if ter is not None else "non-finite ILMA loss")
    rep.fusion = {"baseline": {0.1: 0.19, 0.3: 0.18}, "ilmt": {0.1: 0.2, 0.3: 0.22}}
    return rep


def test_lookups():
    rep = filled_report()
    assert rep.ter("ilmt", "FullILM", 0.2) == 0.15
    assert rep.best("ilmt", "joiner") == 0.20
    assert rep.best("ilmt", "ilm") == 0.15
    assert rep.relative_gain("ilmt", 0.20) == pytest.approx(0.2)
    assert rep.is_complete()
    assert rep.cell("ilmt", "joiner", 0.2).failed


def test_best_of_all_failed_cells_is_infinite():
    rep = ExperimentReport(seed=1, rhos=(0.0,), scopes=("joiner",))
    rep.cells[("ilmt", "joiner", 0.0)] = Cell("ilmt", "joiner", 0.0, error="x")
    assert math.isinf(rep.best("ilmt", "joiner"))
    assert not rep.is_complete()


def test_render_marks_failures_and_regime():
    text = filled_report().render()
    lines = text.splitlines()
    header = next(line for line in lines if line.startswith("regime"))
    assert header.split()[-2:] == ["rho=0.0", "rho=0.2"]
    assert "failed" in text
    assert "baseline+ILMA [no ILMT]" in text
    assert "ilmt+ILMA  " in text
    assert "15.00" in text
    assert "best lam" in text and "Internal-LM perplexity" in text


def test_tsv_twin_has_full_precision():
    rep = filled_report()
    rows = [line.split("\t") for line in rep.tsv().splitlines()]
    assert rows[0] == ["kind", "regime", "scope", "rho", "lam", "metric", "value"]
    assert all(len(r) == 7 for r in rows)
    ilma = [r for r in rows if r[0] == "ilma"]
    assert len(ilma) == 2 * 2 * 2 * 2
    assert ["ilma", "ilmt", "joiner", "0.2", "-", "ter", "nan"] in rows
    assert ["fusion", "baseline", "-", "-", "0.3", "ter", "0.18"] in rows


def test_write(tmp_path):
    txt, tsv = filled_report().write(tmp_path / "rep")
    assert txt.read_text() == filled_report().render()
    assert tsv.name == "rep.tsv"


def test_failed_cells_are_recorded_not_raised(monkeypatch, small_data, small_model):
    calls = {"n": 0}
    real = experiment.adapt_ilma

    def flaky(model, text, cfg):
        calls["n"] += 1
        if calls["n"] == 2:
            raise TrainingDiverged("non-finite ILMA loss in epoch 1", model)
        return real(model, text, cfg)

    monkeypatch.setattr(experiment, "adapt_ilma", flaky)
    cfg = ExperimentConfig(data=DataConfig(**SMALL_DATA))
    cfg = replace(cfg, ilma=replace(cfg.ilma, epochs=1),
                  report=ReportConfig(rhos=(0.0, 0.5), scopes=("joiner",), fusion=False))
    small = replace(small_data, target_test=small_data.target_test[:8], source_test=small_data.source_test[:8])
    rep = run_grid({"baseline": small_model, "ilmt": small_model}, small, cfg)
    assert rep.is_complete()
    failed = [c for c in rep.cells.values() if c.failed]
    assert len(failed) == 1 and "non-finite" in failed[0].error
    assert "failed" in rep.render()
    assert not rep.fusion
