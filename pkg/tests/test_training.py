import numpy as np
import pytest
from helpers import CONSTANTS, SEVEN_NODE, constant_task
from hypothesis import given, settings
from hypothesis import strategies as st

from hiergnn import tensor as T
from hiergnn.backbones import MGMConfig, init_backbone
from hiergnn.data import DataError, SynthConfig, panel_from_bottom, synth_generate
from hiergnn.hierarchy import aggregate, build_hierarchy, check_coherence
from hiergnn.tensor import Tensor, grad_check
from hiergnn.training import Adam, TrainConfig, forecast, hierarchical_loss, train


def _small():
    h, panel = synth_generate(SynthConfig(n_bottom=4, depth=3, T=90, seed=3))
    cfg = MGMConfig(kind="gcn_gru_attn", hidden=4, horizon=3, input_window=8)
    tcfg = TrainConfig(max_epochs=5, batch=16, lr=1e-2)
    return h, panel, cfg, tcfg


def test_loss_examples():
    b = np.zeros((2, 3))
    h = np.zeros((1, 3))
    assert hierarchical_loss(b, b, h, h).item() == 0.0
    assert hierarchical_loss(b, b + 1.0, h, h + 2.0, lam=0.5).item() == pytest.approx(3.0, abs=1e-15)
    assert hierarchical_loss(b, b + 1.0, h, h + 2.0, lam=0.5, loss_kind="mae").item() == pytest.approx(2.0)


def test_loss_with_zero_lambda_is_bottom_loss():
    rng = np.random.default_rng(0)
    bt, bp, ht, hp = (rng.normal(size=s) for s in [(4, 3), (4, 3), (3, 3), (3, 3)])
    assert hierarchical_loss(bt, bp, ht, hp, lam=0.0).item() == np.mean((bp - bt) ** 2)


def test_loss_rejects_negative_lambda_and_bad_shapes():
    z = np.zeros((2, 2))
    with pytest.raises(ValueError):
        hierarchical_loss(z, z, z, z, lam=-0.1)
    with pytest.raises(ValueError):
        hierarchical_loss(z, np.zeros((3, 2)), z, z)
    with pytest.raises(ValueError):
        hierarchical_loss(z, z, z, np.zeros((1, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 5), st.floats(0, 5))
def test_loss_is_monotone_in_lambda(seed, l1, l2):
    rng = np.random.default_rng(seed)
    bt, bp, ht, hp = (rng.normal(size=s) for s in [(3, 2), (3, 2), (2, 2), (2, 2)])
    lo, hi = sorted((l1, l2))
    assert hierarchical_loss(bt, bp, ht, hp, lo).item() <= hierarchical_loss(bt, bp, ht, hp, hi).item()


def test_loss_gradient_through_aggregation():
    h = build_hierarchy(SEVEN_NODE)
    rng = np.random.default_rng(1)
    full_true = aggregate(h.S, rng.normal(size=(4, 3))).full
    S_agg = Tensor(h.S.aggregate_block)

    def f(b):
        return hierarchical_loss(full_true[h.a :], b, full_true[: h.a], S_agg @ b, lam=0.7)

    assert grad_check(f, Tensor(rng.normal(size=(4, 3)))) <= 1e-4
    # analytic oracle: 2/(n·H)·e + λ·2/(a·H)·S_aggᵀ(S_agg e)
    b = rng.normal(size=(4, 3))
    bt = Tensor(b, requires_grad=True)
    g = T.backward(f(bt)).for_(bt)
    e = b - full_true[h.a :]
    Sa = h.S.aggregate_block
    expected = 2 * e / e.size + 0.7 * 2 * Sa.T @ (Sa @ e) / (h.a * 3)
    np.testing.assert_allclose(g, expected, atol=1e-13)


def test_adam_with_zero_lr_is_a_no_op():
    rng = np.random.default_rng(2)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    before = w.data.copy()
    opt = Adam([w], lr=0.0)
    for _ in range(3):
        opt.step(T.backward(T.sum_(w * w)))
    np.testing.assert_array_equal(w.data, before)


def test_adam_first_step_moves_by_lr_times_sign():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    Adam([w], lr=0.1).step(T.backward(T.sum_(w * w)))
    np.testing.assert_allclose(w.data, [0.9, -1.9], atol=1e-8)


def test_early_stop_on_plateau():
    h, panel, cfg, tcfg = _small()
    tcfg = TrainConfig(max_epochs=30, batch=16, lr=1e-2, patience=4)
    _, report = train(tcfg, cfg, panel, h, lr_schedule=lambda e: 1e-2 if e <= 2 else 0.0)
    assert report.best_epoch <= 2
    assert report.stopped_epoch == report.best_epoch + 4
    assert len(report.rows) == report.stopped_epoch
    assert report.val_loss[2:] == [report.val_loss[2]] * (len(report.rows) - 2)


def test_training_is_deterministic():
    h, panel, cfg, tcfg = _small()
    p1, r1 = train(tcfg, cfg, panel, h)
    p2, r2 = train(tcfg, cfg, panel, h)
    assert r1.to_csv() == r2.to_csv()
    assert p1.equals(p2)


def test_best_epoch_params_are_returned():
    h, panel, cfg, tcfg = _small()
    params, report = train(tcfg, cfg, panel, h)
    assert 1 <= report.best_epoch <= report.stopped_epoch
    assert report.best_val_loss == min(report.val_loss)
    # retraining for exactly best_epoch epochs reproduces the returned weights
    again, _ = train(TrainConfig(**{**tcfg.to_dict(), "max_epochs": report.best_epoch}), cfg, panel, h)
    assert params.equals(again)


def test_forecast_shapes_and_coherence():
    h, panel, cfg, tcfg = _small()
    params, _ = train(tcfg, cfg, panel, h)
    for H in (1, 3):
        fs = forecast(params, cfg, panel, h, H)
        assert fs.bottom.shape == (h.n, H) and fs.full.shape == (h.m, H)
        scale = np.abs(fs.full).max()
        assert check_coherence(fs.full, h.S, 1e-9 * (1 + scale))[0]
    with pytest.raises(ValueError):
        forecast(params, cfg, panel, h, 4)


def test_insufficient_data():
    h = build_hierarchy(SEVEN_NODE)
    panel = panel_from_bottom(h, np.ones((4, 20)))
    with pytest.raises(DataError):
        train(TrainConfig(max_epochs=1), MGMConfig(kind="gcn_gru_attn", input_window=12, horizon=3), panel, h)


def test_unaligned_panel_is_rejected():
    h, panel, cfg, tcfg = _small()
    other = build_hierarchy(SEVEN_NODE)
    with pytest.raises(DataError):
        train(tcfg, cfg, panel_from_bottom(other, np.ones((4, 90))), h)


@pytest.mark.parametrize("bad", [dict(lam=-1.0), dict(lr=0.0), dict(patience=0), dict(loss_kind="huber")])
def test_train_config_validation(bad):
    from hiergnn.backbones import ConfigError

    with pytest.raises(ConfigError):
        TrainConfig(**bad).validate()


def test_curriculum_and_mae_paths_run():
    h, panel = synth_generate(SynthConfig(n_bottom=4, depth=3, T=90, seed=4))
    cfg = MGMConfig(kind="mixhop_tcn", hidden=4, horizon=3, input_window=8, layers=1)
    tcfg = TrainConfig(max_epochs=3, batch=32, curriculum=True, loss_kind="mae")
    _, report = train(tcfg, cfg, panel, h)
    assert all(np.isfinite(report.train_loss))


def test_bottom_only_mode_with_covariates():
    h, panel = synth_generate(SynthConfig(n_bottom=4, depth=3, T=90, seed=5))
    cov = np.random.default_rng(0).normal(size=(h.m, 2, panel.T))
    panel = panel_from_bottom(h, panel.bottom(h), covariates=cov[:, :, :])
    cfg = MGMConfig(kind="gegenbauer_tgc", hidden=4, horizon=2, input_window=8, trend_window=3,
                    graph_mode="bottom_only")
    params, _ = train(TrainConfig(max_epochs=2), cfg, panel, h)
    fs = forecast(params, cfg, panel, h)
    assert fs.full.shape == (h.m, 2)


def test_constant_series_are_learned():
    h, params, cfg, report, panel = constant_task("gcn_gru_attn")
    fs = forecast(params, cfg, panel, h)
    np.testing.assert_allclose(fs.bottom, np.repeat(CONSTANTS[:, None], 3, axis=1), atol=1e-3)
    np.testing.assert_allclose(fs.full[0], CONSTANTS.sum(), atol=h.n * 1e-3)
    tl = np.asarray(report.train_loss)
    assert np.mean(np.diff(tl) <= 0) >= 0.8
