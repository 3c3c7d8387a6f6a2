import math

import numpy as np
import pytest

from ilmalab import losses
from ilmalab.numerics import Tensor
from ilmalab.training import (
    Adam,
    AdaptScope,
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    adapt_ilma,
    apply_masked_update,
    ilm_snapshot,
    scope_masks,
    train_baseline,
    train_ilmt,
)
from ilmalab.transducer import Transducer

from conftest import random_model, tiny_config


def toy_pairs(n=12, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        y = list(rng.integers(0, 3, size=rng.integers(1, 4)))
        pairs.append((rng.normal(size=(2 * len(y) + 2, 3)), y))
    return pairs


TEXT = [[0, 1, 2], [2, 2, 1], [1, 0], [0, 0, 2, 1], [2], [1, 2, 0], [0, 1], [2, 0, 1]]
FAST = TrainConfig(epochs=2, batch_size=4, seed=3)


def changed(before: Transducer, after: Transducer) -> dict[str, np.ndarray]:
    """Element-wise bit-level difference masks of the parameters that moved."""
    out = {}
    for k in before.params:
        diff = before[k].data.view(np.uint64) != after[k].data.view(np.uint64)
        if diff.any():
            out[k] = diff
    return out


# -- configuration -------------------------------------------------------------------


@pytest.mark.parametrize("text,scope", [("ilm", AdaptScope.FULL_ILM), ("FullILM", AdaptScope.FULL_ILM),
                                        ("predictor", AdaptScope.PREDICTOR), ("joiner", AdaptScope.JOINER_NB),
                                        ("JoinerNB", AdaptScope.JOINER_NB)])
def test_scope_parse(text, scope):
    assert AdaptScope.parse(text) is scope


def test_scope_parse_rejects_unknown():
    with pytest.raises(ConfigError):
        AdaptScope.parse("encoder")


@pytest.mark.parametrize("kw", [dict(rho=-0.1), dict(rho=1.5), dict(alpha=-1.0), dict(epochs=-1),
                                dict(batch_size=0), dict(clip_norm=0.0), dict(stage="pretrain")])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw).validate()


def test_rho_error_names_the_key():
    with pytest.raises(ConfigError, match="^rho"):
        TrainConfig(rho=2.0).validate()


# -- optimiser and masking ------------------------------------------------------------


def test_adam_first_step_moves_by_lr():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    Adam(0.1).update(p, {"w": np.array([3.0, -0.5])}, {"w": None})
    assert np.allclose(p["w"].data, [0.9, -1.9], rtol=0, atol=1e-8)


def test_zero_gradients_change_nothing():
    model = random_model()
    before = model.copy()
    for scope in (None, *AdaptScope):
        masks = scope_masks(model, scope)
        grads = {k: np.zeros_like(model[k].data) for k in masks}
        apply_masked_update(model.params, grads, masks, Adam(1e-3), 5.0)
    assert not changed(before, model)


def test_gradient_clipping_bounds_global_norm():
    seen = {}

    class Recorder:
        def update(self, params, grads, masks):
            seen.update(grads)

    params = {"a": Tensor(np.zeros(2)), "b": Tensor(np.zeros(1))}
    norm = apply_masked_update(params, {"a": np.array([3.0, 4.0]), "b": np.array([12.0])},
                               {"a": None, "b": None}, Recorder(), 5.0)
    assert norm == pytest.approx(13.0)
    clipped = math.sqrt(sum(float(np.sum(g * g)) for g in seen.values()))
    assert clipped == pytest.approx(5.0, abs=1e-12)
    assert np.allclose(seen["a"], [15 / 13, 20 / 13])


def test_out_of_mask_gradients_do_not_count_towards_norm():
    seen = {}

    class Recorder:
        def update(self, params, grads, masks):
            seen.update(grads)

    mask = np.array([True, False])
    norm = apply_masked_update({"a": Tensor(np.zeros(2))}, {"a": np.array([1.0, 100.0])}, {"a": mask},
                               Recorder(), 5.0)
    assert norm == 1.0
    assert np.array_equal(seen["a"], [1.0, 0.0])


def test_scope_masks_cover_documented_sets():
    model = random_model()
    v = model.vocab_size
    pred = set(model.predictor_names())
    assert set(scope_masks(model, AdaptScope.PREDICTOR)) == pred
    nb = scope_masks(model, AdaptScope.JOINER_NB)
    assert set(nb) == {"joint.w_out", "joint.b_out"}
    assert nb["joint.b_out"].tolist() == [True] * v + [False]
    assert not nb["joint.w_out"][v].any() and nb["joint.w_out"][:v].all()
    full = scope_masks(model, AdaptScope.FULL_ILM)
    assert set(full) == pred | {"joint.w_pred", "joint.b_pred", "joint.w_out", "joint.b_out"}
    assert not any(k.startswith("enc.") or k in ("joint.w_enc", "joint.b_enc") for k in full)


# -- baseline and ILMT training ---------------------------------------------------------


def test_training_reduces_loss():
    pairs = toy_pairs()
    model = Transducer.init(tiny_config(), seed=3)
    before = sum(losses.transducer_loss(model, x, y).value for x, y in pairs)
    trained = train_baseline(pairs, TrainConfig(epochs=30, batch_size=4, seed=3, lr=1e-2), tiny_config())
    after = sum(losses.transducer_loss(trained, x, y).value for x, y in pairs)
    assert after < 0.5 * before


def test_overfit_single_utterance():
    x = np.random.default_rng(1).normal(size=(6, 3))
    model = train_baseline([(x, [2, 0, 1])], TrainConfig(epochs=300, batch_size=1, lr=2e-2), tiny_config())
    assert losses.transducer_loss(model, x, [2, 0, 1]).value < 0.05


def test_training_is_deterministic():
    a = train_ilmt(toy_pairs(), FAST, tiny_config())
    b = train_ilmt(toy_pairs(), FAST, tiny_config())
    assert not changed(a, b)


def test_zero_learning_rate_keeps_the_initialisation():
    model = train_baseline(toy_pairs(), TrainConfig(epochs=2, batch_size=4, seed=3, lr=0.0), tiny_config())
    assert not changed(Transducer.init(tiny_config(), seed=3), model)


def test_ilmt_with_zero_alpha_is_baseline_training():
    a = train_baseline(toy_pairs(), FAST, tiny_config())
    b = train_ilmt(toy_pairs(), TrainConfig(epochs=2, batch_size=4, seed=3, alpha=0.0), tiny_config())
    assert not changed(a, b)


def test_ilmt_lowers_internal_lm_loss():
    pairs = toy_pairs(24)
    cfg = TrainConfig(epochs=15, batch_size=4, seed=3, lr=1e-2, alpha=1.0)
    base = train_baseline(pairs, cfg, tiny_config())
    ilmt = train_ilmt(pairs, cfg, tiny_config())
    text = [y for _, y in pairs]
    assert losses.ilm_corpus_loss(ilmt, text).value < losses.ilm_corpus_loss(base, text).value


def test_training_reports_one_row_per_epoch():
    rows = []
    pairs = toy_pairs()
    train_ilmt(pairs, FAST, tiny_config(), dev_pairs=pairs[:3], report=rows.append)
    assert [r["epoch"] for r in rows] == [1, 2]
    assert {"stage", "e2e_per_token", "ilm_per_token", "dev_e2e_per_token", "dev_ilm_ppl"} <= set(rows[0])
    assert rows[0]["stage"] == "ilmt"


def test_empty_training_set_is_a_config_error():
    with pytest.raises(ConfigError):
        train_baseline([], FAST, tiny_config())


def test_divergence_is_reported_with_last_good_model(monkeypatch):
    calls = {"n": 0}
    real = losses.batch_ilmt_loss

    def flaky(model, batch, alpha):
        calls["n"] += 1
        combined, ilm = real(model, batch, alpha)
        if calls["n"] > 3:
            combined.total.data = np.array(np.nan)
        return combined, ilm

    monkeypatch.setattr(losses, "batch_ilmt_loss", flaky)
    with pytest.raises(TrainingDiverged) as info:
        train_baseline(toy_pairs(), FAST, tiny_config())
    assert all(np.all(np.isfinite(p.data)) for p in info.value.model.params.values())


# -- ILMA ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained():
    return train_ilmt(toy_pairs(), TrainConfig(epochs=3, batch_size=4, seed=3, lr=1e-2), tiny_config())


def adapt(model, scope, rho=0.2, epochs=3):
    return adapt_ilma(model, TEXT, TrainConfig(scope=scope, rho=rho, epochs=epochs, batch_size=3, lr=1e-2))


def test_ilma_leaves_input_model_alone(trained):
    before = trained.copy()
    adapt(trained, AdaptScope.FULL_ILM)
    assert not changed(before, trained)


@pytest.mark.parametrize("scope", list(AdaptScope))
def test_scope_exclusivity(trained, scope):
    after = adapt(trained, scope)
    diff = changed(trained, after)
    v = trained.vocab_size
    pred = set(trained.predictor_names())
    expected = {
        AdaptScope.PREDICTOR: pred,
        AdaptScope.JOINER_NB: {"joint.w_out", "joint.b_out"},
        AdaptScope.FULL_ILM: pred | {"joint.w_pred", "joint.b_pred", "joint.w_out", "joint.b_out"},
    }[scope]
    assert set(diff) == expected
    if "joint.w_out" in diff:
        assert not diff["joint.w_out"][v].any() and not diff["joint.b_out"][v]
        assert diff["joint.w_out"][:v].all()


def test_joiner_scope_preserves_blank_logits(trained):
    after = adapt(trained, AdaptScope.JOINER_NB)
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.normal(size=(6, 3))
        prefix = list(rng.integers(0, 3, size=rng.integers(0, 4)))
        zs = []
        for m in (trained, after):
            h_pred, _ = m.predict(prefix)
            zs.append(np.array([m.joint_logits(h, h_pred).data[m.blank_id] for h in m.encode(x)]))
        assert np.array_equal(zs[0], zs[1])


@pytest.mark.parametrize("scope", list(AdaptScope))
def test_ilma_lowers_adaptation_loss(trained, scope):
    after = adapt(trained, scope, rho=0.0, epochs=8)
    assert losses.ilm_corpus_loss(after, TEXT).value < losses.ilm_corpus_loss(trained, TEXT).value


def test_ilma_never_runs_the_encoder(trained, monkeypatch):
    def forbidden(*args, **kwargs):
        raise AssertionError("the encoder must not run during text-only adaptation")

    monkeypatch.setattr(Transducer, "encode", forbidden)
    monkeypatch.setattr(Transducer, "encode_batch", forbidden)
    adapt(trained, AdaptScope.FULL_ILM)


def test_snapshot_holds_only_the_internal_lm(trained):
    snap = ilm_snapshot(trained)
    assert not any(k.startswith("enc.") for k in snap.params)
    work = trained.copy()
    work["joint.w_out"].data[...] += 1.0
    assert np.array_equal(snap["joint.w_out"].data, trained["joint.w_out"].data)


def test_ilma_is_deterministic(trained):
    assert not changed(adapt(trained, AdaptScope.FULL_ILM), adapt(trained, AdaptScope.FULL_ILM))


def test_ilma_rows_and_best_epoch(trained):
    rows = []
    after = adapt_ilma(trained, TEXT, TrainConfig(scope=AdaptScope.JOINER_NB, epochs=4, batch_size=3, lr=1e-2),
                       report=rows.append)
    assert [r["epoch"] for r in rows] == [1, 2, 3, 4]
    assert {"scope", "rho", "ilma_per_token", "dev_ce", "dev_ppl"} <= set(rows[0])
    dev = TEXT[-1:]
    assert losses.batch_ilm_loss(after, dev).per_token == pytest.approx(min(r["dev_ce"] for r in rows), abs=1e-12)


def test_zero_epochs_returns_a_copy(trained):
    after = adapt_ilma(trained, TEXT, TrainConfig(epochs=0))
    assert after is not trained
    assert not changed(trained, after)


@pytest.mark.parametrize("text", [[], [[]]])
def test_empty_adaptation_corpus(trained, text):
    with pytest.raises(ConfigError):
        adapt_ilma(trained, text, FAST)
