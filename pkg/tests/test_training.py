import math

import numpy as np
import pytest
import torch

from lsttn.errors import CompatibilityError, DivergenceError
from lsttn.training import (
    _make_optimizer,
    _step,
    build_forecaster,
    load_checkpoint,
    lr_schedule,
    model_from_checkpoint,
    mst_from_checkpoint,
    param_hash,
    pretrain,
    save_checkpoint,
    train_forecast,
    validation_mae,
)


def test_lr_schedule():
    assert lr_schedule(0, 1e-3) == 1e-3
    assert lr_schedule(49, 1e-3) == 1e-3
    assert math.isclose(lr_schedule(50, 1e-3), 1e-4)
    assert math.isclose(lr_schedule(80, 1e-3), 1e-5)
    assert math.isclose(lr_schedule(99, 1e-3), 1e-5)
    assert lr_schedule(5, 0.1, ()) == 0.1


def test_adam_closed_form(tiny_setup):
    # constant gradient g: bias-corrected moments equal g and g^2, so each step is lr*g/(|g|+eps)
    cfg, _ = tiny_setup
    p = torch.nn.Parameter(torch.tensor([0.3, -1.2], dtype=torch.float64))
    g = torch.tensor([0.7, -2.5], dtype=torch.float64)
    opt = _make_optimizer([p], cfg, 0.01)
    for _ in range(25):
        _step((p * g).sum(), [p], opt, 0.0, "test")
    expected = np.array([0.3, -1.2]) - 25 * 0.01 * g.numpy() / (np.abs(g.numpy()) + cfg.train.eps)
    np.testing.assert_allclose(p.detach().numpy(), expected, atol=1e-12, rtol=0)


def test_adam_one_step_on_quadratic(tiny_setup):
    cfg, _ = tiny_setup
    p0 = np.array([1.5, -0.4, 0.02])
    p = torch.nn.Parameter(torch.tensor(p0))
    opt = _make_optimizer([p], cfg, 0.05)
    _step(((p - 1.0) ** 2).sum(), [p], opt, 0.0, "test")
    g = 2 * (p0 - 1.0)
    m_hat = (1 - 0.9) * g / (1 - 0.9)
    v_hat = (1 - 0.999) * g ** 2 / (1 - 0.999)
    expected = p0 - 0.05 * m_hat / (np.sqrt(v_hat) + 1e-8)
    np.testing.assert_allclose(p.detach().numpy(), expected, atol=1e-12, rtol=0)


def test_nonfinite_loss_names_context():
    p = torch.nn.Parameter(torch.zeros(1))
    with pytest.raises(DivergenceError, match="epoch 3"):
        _step(p.sum() * float("nan"), [p], torch.optim.Adam([p]), 5.0, "epoch 3 step 0")


@pytest.fixture
def pretrained(tiny_setup):
    cfg, data = tiny_setup
    return cfg, data, pretrain(cfg, data)


def test_pretrain_history_and_checkpoint(pretrained, tmp_path):
    cfg, data, res = pretrained
    assert len(res.history) == 2 and all(math.isfinite(h["val_loss"]) for h in res.history)
    assert res.best_val == min(h["val_loss"] for h in res.history)
    save_checkpoint(res.checkpoint, tmp_path / "p.pt")
    mst = mst_from_checkpoint(load_checkpoint(tmp_path / "p.pt"), cfg)
    assert param_hash(mst) == param_hash(res.model)
    cfg.mst.d_repr = 16
    with pytest.raises(CompatibilityError, match="d_repr"):
        mst_from_checkpoint(res.checkpoint, cfg)


def test_pretrain_lr_zero(tiny_setup):
    cfg, data = tiny_setup
    cfg.train.pretrain_lr = 0.0
    from lsttn.training import build_mst

    torch.manual_seed(cfg.train.seed)
    before = param_hash(build_mst(cfg))
    assert param_hash(pretrain(cfg, data, epochs=1).model) == before


def test_lr_zero_leaves_parameters(pretrained):
    cfg, data, res = pretrained
    cfg.train.lr = 0.0
    fresh = build_forecaster(cfg, data, res.model, "full")
    trained = train_forecast(cfg, data, res.model, "full").model
    assert param_hash(trained) == param_hash(fresh)


def test_frozen_encoder_unchanged(pretrained):
    cfg, data, res = pretrained
    before = param_hash(res.model)
    train_forecast(cfg, data, res.model, "full")
    assert param_hash(res.model) == before


def test_forecast_deterministic(pretrained):
    cfg, data, res = pretrained
    a = train_forecast(cfg, data, res.model, "full")
    b = train_forecast(cfg, data, res.model, "full")
    assert a.test_report == b.test_report
    assert [h["train_loss"] for h in a.history] == [h["train_loss"] for h in b.history]


def test_checkpoint_round_trip_bitwise(pretrained, tmp_path):
    cfg, data, res = pretrained
    out = train_forecast(cfg, data, res.model, "full")
    save_checkpoint(out.checkpoint, tmp_path / "m.pt")
    loaded = load_checkpoint(tmp_path / "m.pt")
    assert validation_mae(loaded, data) == validation_mae(out.checkpoint, data) == out.best_val
    model, _ = model_from_checkpoint(loaded, data)
    assert param_hash(model) == param_hash(out.model)


def test_st_only_needs_no_encoder(tiny_setup):
    cfg, data = tiny_setup
    out = train_forecast(cfg, data, None, "st_only")
    assert out.model.mst is None and "mst" not in out.checkpoint["params"]
    with pytest.raises(CompatibilityError):
        train_forecast(cfg, data, None, "full")


def test_checkpoint_layout_mismatch(pretrained, tiny_config_path):
    from lsttn.config import load_config
    from lsttn.training import prepare_data

    cfg, data, res = pretrained
    ckpt = train_forecast(cfg, data, res.model, "full").checkpoint
    cfg2 = load_config(tiny_config_path)
    cfg2.layout.L = 96
    with pytest.raises(CompatibilityError):
        model_from_checkpoint(ckpt, prepare_data(cfg2))
