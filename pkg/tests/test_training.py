import numpy as np
import pytest
from hypothesis import given, strategies as st

from hrflow import nn
from hrflow.distributions import GaussianMixture, StandardGaussian
from hrflow.errors import ConfigError, TrainingError
from hrflow.fixtures import FIXTURES
from hrflow.model import HrfModel
from hrflow.training import (TrainConfig, build_example, loss_and_grads, make_training_example,
                             per_example_loss, train, write_loss_csv)

TINY = dict(embed_dim=4, space_width=6, hidden_dims=(16, 16))


def _reference_example(x1, x0, t):
    """Independent re-derivation: location entries and target written out directly."""
    D = x0.shape[0]
    x_t = np.empty_like(x0)
    for d in range(D):
        shift = sum((x0[k] for k in range(d)), np.zeros_like(x1))
        x_t[d] = (1 - t[d][:, None]) * x0[d] + t[d][:, None] * (x1 - shift)
    return x_t, x1 - x0.sum(axis=0)


def test_d1_boundary_at_t0(rng):
    x1 = rng.standard_normal((5, 1))
    x0 = rng.standard_normal((1, 5, 1))
    ex = build_example(x1, x0, np.zeros((1, 5)))
    np.testing.assert_array_equal(ex.x_t[0], x0[0])
    np.testing.assert_array_equal(ex.target, x1 - x0[0])


def test_d2_plugged_values():
    a, b, c = 0.3, -1.1, 2.0
    ex = build_example(np.array([[c]]), np.array([[[a]], [[b]]]), np.array([[1.0], [0.0]]))
    assert ex.x_t[0, 0, 0] == c
    assert ex.x_t[1, 0, 0] == b
    assert ex.target[0, 0] == pytest.approx(c - a - b, abs=1e-15)


def test_d3_recurrence_matches_reference():
    rng = np.random.default_rng(11)
    x1 = rng.standard_normal((10_000, 2))
    ex = make_training_example(x1, rng, 3)
    x_t, target = _reference_example(x1, ex.x0, ex.t)
    np.testing.assert_allclose(ex.x_t, x_t, rtol=0, atol=1e-13)
    np.testing.assert_allclose(ex.target, target, rtol=0, atol=1e-13)


@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_recurrence_property(depth, seed):
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal((7, 1))
    ex = make_training_example(x1, rng, depth)
    x_t, target = _reference_example(x1, ex.x0, ex.t)
    np.testing.assert_allclose(ex.x_t, x_t, atol=1e-12)
    np.testing.assert_allclose(ex.target, target, atol=1e-12)
    assert np.all((ex.t >= 0) & (ex.t <= 1))


def test_d2_matches_acceleration_matching_form(rng):
    # (x_t, t, v_tau, tau, x1 - x0 - v0) with x_t = (1-t) x0 + t x1, v_tau = (1-tau) v0 + tau (x1 - x0)
    x1 = rng.standard_normal((100, 1))
    ex = make_training_example(x1, rng, 2)
    x0, v0 = ex.x0
    t, tau = ex.t[0][:, None], ex.t[1][:, None]
    np.testing.assert_allclose(ex.x_t[0], (1 - t) * x0 + t * x1, atol=1e-14)
    np.testing.assert_allclose(ex.x_t[1], (1 - tau) * v0 + tau * (x1 - x0), atol=1e-14)
    np.testing.assert_allclose(ex.target, x1 - x0 - v0, atol=1e-14)


def test_depth_one_generic_loss_equals_classic_rf():
    rng = np.random.default_rng(9)
    model = HrfModel(nn.init_params(nn.MlpConfig(depth=1, **TINY), rng))
    x1 = rng.standard_normal((10_000, 1))
    ex = make_training_example(x1, rng, 1)
    generic = per_example_loss(model, ex)
    # hand-written rectified flow: || x1 - x0 - v(x_t, t) ||^2 with x_t = t x1 + (1 - t) x0
    x0, t = ex.x0[0], ex.t[0]
    xt = t[:, None] * x1 + (1 - t[:, None]) * x0
    classic = np.mean((x1 - x0 - model([xt], [t])) ** 2, axis=1)
    np.testing.assert_allclose(generic, classic, rtol=0, atol=1e-12)


def test_make_example_rejects_depth0(rng):
    with pytest.raises(ConfigError):
        make_training_example(np.zeros((2, 1)), rng, 0)


# -- loss ----------------------------------------------------------------------

def _zero_model(depth=2):
    cfg = nn.MlpConfig(depth=depth, zero_init_last=True, **TINY)
    return HrfModel(nn.init_params(cfg, np.random.default_rng(0)))


def test_zero_predictor_unit_targets():
    model = _zero_model()
    x1 = np.zeros((4, 1))
    x0 = np.stack([-np.ones((4, 1)), np.zeros((4, 1))])
    ex = build_example(x1, x0, np.full((2, 4), 0.5))
    assert np.all(np.abs(ex.target) == 1.0)
    loss, _ = loss_and_grads(model, ex)
    assert loss == pytest.approx(1.0)


def test_perfect_predictor_has_zero_loss(rng):
    model = _zero_model()
    x1 = rng.standard_normal((6, 1))
    ex = make_training_example(x1, rng, 2)
    ex.target[...] = 0.0
    loss, grads = loss_and_grads(model, ex)
    assert loss == 0.0 and not np.any(grads.flat)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    model = HrfModel(nn.init_params(nn.MlpConfig(depth=2, embed_dim=4, space_width=3, hidden_dims=(5,)), rng))
    ex = make_training_example(rng.standard_normal((8, 1)), rng, 2)
    _, grads = loss_and_grads(model, ex)

    def loss():
        pred = nn.forward(model.params, list(ex.x_t), list(ex.t))
        return float(np.mean((pred - ex.target) ** 2))
    flat = model.params.flat
    fd = nn.central_difference(loss, flat)
    err = np.abs(grads.flat - fd) / np.maximum(np.maximum(np.abs(grads.flat), np.abs(fd)), 1e-6)
    assert err.max() <= 1e-4


def test_non_finite_loss_raises(rng):
    model = _zero_model()
    ex = make_training_example(rng.standard_normal((3, 1)), rng, 2)
    ex.target[0, 0] = np.nan
    with pytest.raises(TrainingError):
        loss_and_grads(model, ex)


def test_empty_batch_rejected():
    model = _zero_model()
    ex = build_example(np.zeros((0, 1)), np.zeros((2, 0, 1)), np.zeros((2, 0)))
    with pytest.raises(ConfigError):
        loss_and_grads(model, ex)


# -- training loop -------------------------------------------------------------

def _cfg(**kw):
    base = dict(source=StandardGaussian(1), target=GaussianMixture([1.0], [[0.0]], [[1.0]]), depth=1,
                iterations=500, batch_size=256, seed=5, dataset_size=0, log_every=50, **TINY)
    base.update(kw)
    return TrainConfig(**base)


def test_d1_training_reduces_loss():
    _, losses = train(_cfg())
    assert losses[-50:].mean() < losses[:50].mean()
    assert np.all(np.isfinite(losses))


def test_training_is_deterministic():
    cfg = _cfg(iterations=60, depth=2)
    a, la = train(cfg)
    b, lb = train(cfg)
    assert np.array_equal(a.params.flat, b.params.flat) and np.array_equal(la, lb)


def test_different_seeds_differ():
    a, _ = train(_cfg(iterations=5, seed=1))
    b, _ = train(_cfg(iterations=5, seed=2))
    assert not np.array_equal(a.params.flat, b.params.flat)


@pytest.mark.parametrize("name", sorted(FIXTURES))
def test_loss_trend_every_fixture(name):
    src, tgt = FIXTURES[name]
    cfg = TrainConfig(src, tgt, depth=2, iterations=2000, batch_size=128, seed=0, dataset_size=10_000,
                      log_every=100, **TINY)
    _, losses = train(cfg)
    smooth = np.convolve(losses, np.ones(100) / 100, mode="valid")
    assert smooth[2000 - 100] < losses[0]
    assert np.all(np.isfinite(losses))


def test_fixed_dataset_mode_cycles_points():
    data = np.arange(10.0)[:, None]
    cfg = _cfg(iterations=3, batch_size=4, depth=1)
    model, losses = train(cfg, dataset=data)
    assert len(losses) == 3


def test_ot_coupling_training_runs():
    _, losses = train(_cfg(iterations=20, coupling="ot", ot_chunk=64, depth=2))
    assert np.all(np.isfinite(losses))


@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(iterations=0), dict(coupling="sinkhorn"),
                                dict(lr_schedule="step"), dict(dataset_size=-1),
                                dict(target=StandardGaussian(2))])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        _cfg(**kw)


def test_level_sources_default_and_override():
    cfg = _cfg(depth=3)
    assert cfg.level_sources() == [StandardGaussian(1)] * 3
    with pytest.raises(ConfigError):
        _cfg(depth=3, inner_sources=[StandardGaussian(1)]).level_sources()


def test_divergence_reports_iteration():
    # squared error of a 1e200 target overflows on the first step
    cfg = _cfg(iterations=5, batch_size=2, depth=1)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingError, match="at iteration 0"):
            train(cfg, dataset=np.array([[1e200], [1e200]]))


def test_loss_csv_rows(tmp_path):
    losses = np.linspace(1, 0, 40)
    write_loss_csv(tmp_path / "l.csv", losses, 10)
    rows = (tmp_path / "l.csv").read_text().splitlines()
    assert rows[0] == "iteration,loss" and len(rows) == 1 + 4
    assert rows[1].startswith("10,")
