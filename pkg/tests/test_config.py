import pytest

from ilmalab.config import (
    ConfigFileError,
    ExperimentConfig,
    default_config_text,
    load_config,
    parse_config,
)
from ilmalab.training import AdaptScope, ConfigError


def test_defaults_follow_the_documented_protocol():
    cfg = ExperimentConfig()
    assert cfg.report.rhos == (0.0, 0.2, 0.5, 0.8)
    assert cfg.report.scopes == ("ilm", "predictor", "joiner")
    assert cfg.decode.beam == 5
    assert cfg.train.lr == 1e-3 and cfg.train.clip_norm == 5.0
    assert cfg.model.vocab_size == 30


def test_empty_text_gives_defaults():
    assert parse_config("") == ExperimentConfig()
    assert load_config(None) == ExperimentConfig()


def test_default_text_round_trips():
    cfg = ExperimentConfig().with_seed(23)
    assert parse_config(default_config_text(cfg)) == cfg


def test_every_train_field_is_documented_in_the_rendered_config():
    text = default_config_text()
    for key in ("alpha", "rho", "scope", "lr", "lr_decay", "beta1", "beta2", "eps", "clip_norm", "epochs",
                "batch_size", "seed", "dev_fraction"):
        assert f"\n{key} = " in text.split("[ilma]")[1]


def test_values_are_parsed():
    cfg = parse_config("""
[data]
n_pairs = 4   # eight tokens
contrary_templates = no
[ilma]
scope = Predictor
rho = 0.5
[report]
rhos = 0.0, 0.8
scopes = joiner, ilm
fusion = false
""")
    assert cfg.data.n_pairs == 4 and cfg.model.vocab_size == 8
    assert cfg.data.contrary_templates is False
    assert cfg.ilma.scope is AdaptScope.PREDICTOR and cfg.ilma.rho == 0.5
    assert cfg.report.rhos == (0.0, 0.8)
    assert cfg.report.scopes == ("joiner", "ilm")
    assert cfg.report.fusion is False


def test_feature_dim_follows_data_section():
    assert parse_config("[data]\nfeat_dim = 5\n").model.feat_dim == 5


def test_with_seed_reaches_every_stage():
    cfg = ExperimentConfig().with_seed(99)
    assert cfg.data.seed == cfg.train.seed == cfg.ilma.seed == 99


@pytest.mark.parametrize("text,line", [
    ("[train]\nepochs = 3\nbogus = 1\n", 3),
    ("[train]\nepochs = three\n", 2),
    ("[nowhere]\nx = 1\n", 1),
    ("[ilma]\nepochs = 2\n\nrho = 1.5\n", 4),
    ("[model]\nactivation = gelu\n", 2),
    ("[data]\nseed = 1\nthis line is broken\n", 3),
    ("[decode]\nbeam = 0\n", 2),
    ("[report]\nscopes = ilm, encoder\n", 2),
    ("[model]\nvocab_size = 12\n", 2),
])
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigFileError) as info:
        parse_config(text, "lab.ini")
    assert info.value.line == line
    assert str(info.value).startswith(f"lab.ini:{line}:")
    assert isinstance(info.value, ConfigError)


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigFileError):
        load_config(tmp_path / "missing.ini")


def test_load_from_file(tmp_path):
    path = tmp_path / "lab.ini"
    path.write_text("[train]\nalpha = 0.25\n")
    assert load_config(path).train.alpha == 0.25
