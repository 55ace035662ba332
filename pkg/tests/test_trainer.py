import copy

import numpy as np
import pytest
import torch

from mfcal.errors import ConfigError, NumericError
from mfcal.loss import LossConfig
from mfcal.net import build_config, init
from mfcal.trainer import (
    CalibrationStep,
    RowFilter,
    TrainConfig,
    apply_freezes,
    make_optimizer,
    train,
    two_step_calibrate,
)


def _fresh(split, seed=0):
    tr, _, dom = split
    return init(build_config(tr), tr, seed=seed, domain=dom)


def _state_equal(a, b):
    return all(torch.equal(v, b[k]) for k, v in a.items())


def test_history_rows_follow_log_interval(three_source):
    tr, va, _ = three_source
    _, hist = train(_fresh(three_source), tr, va, LossConfig(), TrainConfig(epochs=25, log_interval=10))
    assert [r["epoch"] for r in hist.rows] == [10, 20, 25]
    assert len(hist.train_loss) == 25
    row = hist.rows[-1]
    for key in ("train.total", "val.total", "val.nll_cal", "theta_mean.s2.t1_s2", "theta_std.s1.t2_s1"):
        assert key in row
    assert hist.best_epoch in (10, 20, 25)


def test_single_epoch_single_row(two_source):
    tr, va, _ = two_source
    _, hist = train(_fresh(two_source), tr, va, LossConfig(), TrainConfig(epochs=1))
    assert len(hist.rows) == 1 and hist.rows[0]["epoch"] == 1


def test_training_is_deterministic(two_source):
    tr, va, _ = two_source
    cfg = TrainConfig(epochs=30, seed=3, batch_size=32)
    a, ha = train(_fresh(two_source), tr, va, LossConfig(), cfg)
    b, hb = train(_fresh(two_source), tr, va, LossConfig(), cfg)
    assert _state_equal(a.state_dict(), b.state_dict())
    assert ha.train_loss == hb.train_loss


def test_eps_seed_changes_trajectory(two_source):
    tr, va, _ = two_source
    a, _ = train(_fresh(two_source), tr, va, LossConfig(), TrainConfig(epochs=5, seed=1))
    b, _ = train(_fresh(two_source), tr, va, LossConfig(), TrainConfig(epochs=5, seed=2))
    assert not torch.equal(a.posterior.mu, b.posterior.mu)


def test_loss_decreases(two_source):
    tr, va, _ = two_source
    _, hist = train(_fresh(two_source), tr, va, LossConfig(), TrainConfig(epochs=300, restore_best=False))
    assert np.mean(hist.train_loss[-20:]) < np.mean(hist.train_loss[:20]) - 1.0


def test_restore_best_picks_lowest_validation(two_source):
    tr, va, _ = two_source
    net, hist = train(_fresh(two_source), tr, va, LossConfig(), TrainConfig(epochs=60, log_interval=5))
    vals = [r["val.total"] for r in hist.rows]
    assert hist.best_val == min(vals)
    assert hist.best_epoch == hist.rows[int(np.argmin(vals))]["epoch"]


def test_optimizer_groups(net3):
    opt = make_optimizer(net3, TrainConfig())
    decay, plain = opt.param_groups
    assert decay["weight_decay"] == 1e-4 and plain["weight_decay"] == 0.0
    post_ids = {id(net3.posterior.mu), id(net3.posterior.log_std)}
    assert {id(p) for p in plain["params"]} == post_ids
    assert not post_ids & {id(p) for p in decay["params"]}
    n_all = sum(1 for _ in net3.parameters())
    assert len(decay["params"]) + len(plain["params"]) == n_all


def test_weight_decay_leaves_posterior_alone(net3):
    # with zero gradients AdamW only applies decay; the posterior must not move
    opt = make_optimizer(net3, TrainConfig(weight_decay=0.5, lr=0.1))
    before_mu = net3.posterior.mu.detach().clone()
    before_w = net3.block3[0].weight.detach().clone()
    for p in net3.parameters():
        p.grad = torch.zeros_like(p)
    opt.step()
    assert torch.equal(net3.posterior.mu, before_mu)
    assert not torch.equal(net3.block3[0].weight, before_w)


def test_frozen_parameter_stays_pinned(three_source):
    tr, va, _ = three_source
    net = _fresh(three_source)
    cfg = TrainConfig(epochs=40, frozen={"t1_s2": -0.5}, log_interval=10)
    net, hist = train(net, tr, va, LossConfig(), cfg)
    for row in hist.rows:
        assert row["theta_mean.s2.t1_s2"] == pytest.approx(-0.5, abs=1e-12)
        assert row["theta_std.s2.t1_s2"] == 0.0
    moved = {r["theta_mean.s1.t1_s1"] for r in hist.rows}
    assert len(moved) > 1


def test_frozen_entry_gets_no_gradient(three_source):
    from mfcal.dataset import Batch
    from mfcal.loss import total_loss

    tr, _, _ = three_source
    net = _fresh(three_source)
    apply_freezes(net, tr, {"t1_s1": 0.3})
    rep = total_loss(Batch.from_dataset(tr), net, LossConfig(), eps=torch.Generator().manual_seed(0))
    rep.total.backward()
    assert net.posterior.mu.grad[1, 0] == 0.0 and net.posterior.log_std.grad[1, 0] == 0.0
    assert net.posterior.mu.grad[1, 1] != 0.0


def test_freeze_none_keeps_current_mean(three_source):
    tr, _, _ = three_source
    net = _fresh(three_source)
    with torch.no_grad():
        before = net.posterior.mean_theta(2).clone()
    apply_freezes(net, tr, {"t1_s2": None})
    with torch.no_grad():
        assert torch.allclose(net.posterior.mean_theta(2), before, atol=1e-12)


def test_unknown_frozen_name(three_source):
    tr, va, _ = three_source
    with pytest.raises(ConfigError, match="nope"):
        train(_fresh(three_source), tr, va, LossConfig(), TrainConfig(epochs=1, frozen={"nope": 0.0}))


def test_frozen_value_outside_domain(three_source):
    tr, va, _ = three_source
    with pytest.raises(ConfigError):
        train(_fresh(three_source), tr, va, LossConfig(), TrainConfig(epochs=1, frozen={"t1_s2": 9.0}))


def test_numeric_failure_names_term(two_source):
    tr, va, _ = two_source
    net = _fresh(two_source)
    with torch.no_grad():
        net.block3[0].weight[0, 0] = float("nan")
    with pytest.raises(NumericError) as err:
        train(net, tr, va, LossConfig(), TrainConfig(epochs=2))
    assert err.value.term and "epoch 1" in str(err.value)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        RowFilter("x_1", "==", 0.0)


def test_minibatch_training_runs(three_source):
    tr, va, _ = three_source
    _, hist = train(_fresh(three_source), tr, va, LossConfig(), TrainConfig(epochs=3, batch_size=64))
    assert len(hist.train_loss) == 3 and all(np.isfinite(hist.train_loss))


def test_single_step_equals_plain_train(two_source):
    tr, va, _ = two_source
    cfg = TrainConfig(epochs=20, seed=5)
    a, _ = train(_fresh(two_source), tr, va, LossConfig(), cfg)
    b, hists = two_step_calibrate(_fresh(two_source), tr, va, LossConfig(), [CalibrationStep(copy.copy(cfg))])
    assert len(hists) == 1
    assert _state_equal(a.state_dict(), b.state_dict())


def test_two_step_filters_and_freezes(three_source):
    tr, va, _ = three_source
    steps = [
        CalibrationStep(TrainConfig(epochs=15, log_interval=5), filter=RowFilter("x_1", "<=", 0.5),
                        frozen={"t1_s2": -0.5}),
        CalibrationStep(TrainConfig(epochs=15, log_interval=5), frozen={"t1_s1": None}),
    ]
    net, hists = two_step_calibrate(_fresh(three_source), tr, va, LossConfig(), steps)
    assert len(hists) == 2
    for row in hists[0].rows:
        assert row["theta_mean.s2.t1_s2"] == pytest.approx(-0.5, abs=1e-12)
    pinned = [r["theta_mean.s1.t1_s1"] for r in hists[1].rows]
    assert max(pinned) - min(pinned) < 1e-12
    # the first step's pin is released in the second
    assert len({r["theta_mean.s2.t1_s2"] for r in hists[1].rows}) > 1


def test_filter_mask_on_raw_values(three_source):
    tr, _, _ = three_source
    kept = RowFilter("x_1", "<=", 0.5).apply(tr)
    assert len(kept) > 0 and np.all(kept.raw_x()[:, 0] <= 0.5)
    assert len(kept) == int(np.sum(tr.raw_x()[:, 0] <= 0.5))
    with pytest.raises(ConfigError):
        RowFilter("x_9", "<", 0.0).apply(tr)


def test_two_step_guards(three_source):
    tr, va, _ = three_source
    with pytest.raises(ConfigError):
        two_step_calibrate(_fresh(three_source), tr, va, LossConfig(), [])
    step = CalibrationStep(TrainConfig(epochs=1), filter=RowFilter("x_1", ">", 100.0))
    with pytest.raises(ConfigError, match="no training rows"):
        two_step_calibrate(_fresh(three_source), tr, va, LossConfig(), [step])
