"""Increment loss, training loop, and sequence evaluation tests.

Training runs here use deliberately tiny configs; convergence-quality
checks live in the acceptance suite.
"""

import numpy as np
import pytest

from conftest import (fd_gradient, rel_err, synthetic_sequence,
                      tiny_model_config)
from gyrocal import so3
from gyrocal.dataset import compute_norm_stats, make_windows, split_sequence
from gyrocal.errors import NumericError
from gyrocal.model import CalibNet, calibrate
from gyrocal.synth import ErrorModel
from gyrocal.tape import Tensor
from gyrocal.training import (TrainConfig, evaluate_loss, evaluate_sequence,
                              increment_loss, train, train_config_from_dict)


def _gt_from_omega(omega, t):
    return so3.integrate_gyro(np.eye(3), omega, t)


class TestIncrementLoss:
    def test_zero_when_rates_match_gt(self, rng):
        n = 48
        t = np.arange(n) * 0.01
        omega = rng.normal(size=(n, 3)) * 0.5
        gt = _gt_from_omega(omega, t)
        loss = increment_loss(Tensor(omega.T), t, gt.rotations, (8, 16))
        assert float(loss.data) < 1e-22

    def test_single_axis_closed_form(self):
        n = 17
        dt = 0.01
        t = np.arange(n) * dt
        horizon = 16
        eps = 0.03
        gt = _gt_from_omega(np.zeros((n, 3)), t)  # static truth
        omega = np.zeros((n, 3))
        omega[:, 0] = eps
        loss = increment_loss(Tensor(omega.T), t, gt.rotations, (horizon,))
        want = np.log(np.cosh(eps * horizon * dt))  # single term, x-axis only
        assert abs(float(loss.data) - want) < 1e-12

    def test_normalized_by_increment_count(self):
        # duplicating the stride count must not change a uniform loss
        dt = 0.01
        eps = 0.02
        gt_short = _gt_from_omega(np.zeros((9, 3)), np.arange(9) * dt)
        gt_long = _gt_from_omega(np.zeros((17, 3)), np.arange(17) * dt)
        om_short = np.zeros((9, 3))
        om_short[:, 1] = eps
        om_long = np.zeros((17, 3))
        om_long[:, 1] = eps
        a = increment_loss(Tensor(om_short.T), np.arange(9) * dt,
                           gt_short.rotations, (8,))
        b = increment_loss(Tensor(om_long.T), np.arange(17) * dt,
                           gt_long.rotations, (8,))
        assert abs(float(a.data) - float(b.data)) < 1e-15

    def test_gradient_matches_finite_differences(self, rng):
        n = 33
        t = np.arange(n) * 0.01
        omega_gt = rng.normal(size=(n, 3)) * 0.4
        gt = _gt_from_omega(omega_gt, t)
        om = Tensor(omega_gt.T + rng.normal(size=(3, n)) * 0.05, requires_grad=True)

        def loss():
            return increment_loss(om, t, gt.rotations, (4, 8))

        om.zero_grad()
        loss().backward()
        num = fd_gradient(loss, om)
        assert rel_err(om.grad, num) < 1e-4

    def test_invariant_to_global_gt_rotation(self, rng):
        n = 33
        t = np.arange(n) * 0.01
        omega = rng.normal(size=(n, 3)) * 0.4
        gt = _gt_from_omega(omega, t)
        om = Tensor(omega.T + 0.01)
        a = increment_loss(om, t, gt.rotations, (8,))
        Q = so3.exp_so3(rng.normal(size=3))
        rotated = np.einsum("ij,njk->nik", Q, gt.rotations)
        b = increment_loss(om, t, rotated, (8,))
        assert abs(float(a.data) - float(b.data)) < 1e-12

    def test_nonnegative_and_zero_iff_match(self, rng):
        n = 25
        t = np.arange(n) * 0.01
        omega = rng.normal(size=(n, 3)) * 0.3
        gt = _gt_from_omega(omega, t)
        mismatched = increment_loss(Tensor(omega.T + 0.01), t, gt.rotations, (6,))
        assert float(mismatched.data) > 0.0

    def test_pad_start_skips_padded_region(self, rng):
        n = 24
        t = np.arange(n) * 0.01
        omega = rng.normal(size=(n, 3)) * 0.3
        gt = _gt_from_omega(omega, t)
        # corrupt the first 8 samples; starting past them must see zero loss
        bad = omega.copy()
        bad[:8] += 1.0
        loss = increment_loss(Tensor(bad.T), t, gt.rotations, (8,), start=8)
        assert float(loss.data) < 1e-20

    def test_horizon_exceeding_window_rejected(self, rng):
        n = 10
        t = np.arange(n) * 0.01
        gt = _gt_from_omega(np.zeros((n, 3)), t)
        with pytest.raises(ValueError):
            increment_loss(Tensor(np.zeros((3, n))), t, gt.rotations, (50,))


def _tiny_dataset(rng, n_samples=600, window=64):
    """Pure-bias corrupted sequence split into train/val windows."""
    model = ErrorModel(gyro_bias=[0.02, -0.01, 0.015])
    seq, _ = synthetic_sequence(model, seed=5, duration_s=n_samples / 100.0,
                                rate_hz=100.0)
    stats = compute_norm_stats([seq])
    head, tail = split_sequence(seq, train_seconds=0.7 * seq.t[-1])
    train_w = make_windows(head, stats, window, window // 2)
    val_w = make_windows(tail, stats, window, window)
    return train_w, val_w, stats, seq


class TestTrainLoop:
    def test_zero_lr_keeps_parameters(self, rng):
        train_w, val_w, _, _ = _tiny_dataset(rng)
        cfg = tiny_model_config()
        tcfg = TrainConfig(lr=1e-30, weight_decay=0.0, dropout=0.0, epochs=1,
                           horizons=(8,), aug_noise=0.0, seed=1, window=64)
        before = CalibNet(cfg, seed=1).state_arrays()
        result = train(train_w, val_w, cfg, tcfg)
        assert len(result.report.rows) == 1
        after = result.net.state_arrays()
        for k in before:
            if k.endswith("running_mean") or k.endswith("running_var"):
                continue  # BN running stats move in train mode regardless
            assert np.max(np.abs(after[k] - before[k])) < 1e-20, k

    def test_validation_loss_drops_10x_on_pure_bias(self, rng):
        train_w, val_w, _, _ = _tiny_dataset(rng)
        tcfg = TrainConfig(lr=0.01, weight_decay=0.0, dropout=0.0, epochs=150,
                           horizons=(8, 16), aug_noise=0.0, seed=0, window=64,
                           scheduler_patience=40)
        result = train(train_w, val_w, tiny_model_config(), tcfg)
        first = result.report.rows[0].val_loss
        assert result.report.best_val_loss <= first / 10.0

    def test_deterministic_given_seed(self, rng):
        train_w, val_w, _, _ = _tiny_dataset(rng)
        tcfg = TrainConfig(lr=0.005, weight_decay=0.1, dropout=0.1, epochs=3,
                           horizons=(8,), aug_noise=0.01, seed=42, window=64)
        a = train(train_w, val_w, tiny_model_config(dropout=0.1), tcfg)
        b = train(train_w, val_w, tiny_model_config(dropout=0.1), tcfg)
        for k, v in a.net.state_arrays().items():
            assert np.array_equal(v, b.net.state_arrays()[k]), k
        ra = [(r.train_loss, r.val_loss, r.lr) for r in a.report.rows]
        rb = [(r.train_loss, r.val_loss, r.lr) for r in b.report.rows]
        assert ra == rb

    def test_nonfinite_loss_aborts_with_epoch(self, rng):
        train_w, val_w, _, _ = _tiny_dataset(rng)
        bad = [w for w in train_w]
        bad[0].raw_gyro[0, 5] = np.nan
        tcfg = TrainConfig(lr=0.01, weight_decay=0.0, dropout=0.0, epochs=2,
                           horizons=(8,), aug_noise=0.0, seed=0, window=64)
        with pytest.raises(NumericError, match="epoch 1"):
            train(bad, val_w, tiny_model_config(), tcfg)

    def test_report_csv_format(self, rng, tmp_path):
        train_w, val_w, _, _ = _tiny_dataset(rng)
        tcfg = TrainConfig(lr=0.01, weight_decay=0.0, dropout=0.0, epochs=2,
                           horizons=(8,), aug_noise=0.0, seed=0, window=64)
        result = train(train_w, val_w, tiny_model_config(), tcfg)
        path = tmp_path / "report.csv"
        result.report.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,lr,seconds"
        assert len(lines) == 3
        for line in lines[1:]:
            cells = line.split(",")
            assert len(cells) == 5
            int(cells[0])
            [float(c) for c in cells[1:]]


class TestTrainConfig:
    def test_from_dict(self):
        cfg = train_config_from_dict({
            "lr": "0.002", "epochs": "7", "horizons": "4,8",
            "aug_noise": "0", "window": "128", "norm_per_sequence": "true",
        })
        assert cfg.lr == 0.002
        assert cfg.epochs == 7
        assert cfg.horizons == (4, 8)
        assert cfg.norm_per_sequence is True

    def test_stride_defaults_to_quarter_window(self):
        cfg = TrainConfig(window=400)
        assert cfg.effective_stride == 100

    def test_invalid_horizon_rejected(self):
        from gyrocal.errors import ConfigError

        with pytest.raises(ConfigError):
            TrainConfig(window=16, horizons=(32,))


class TestEvaluateSequence:
    def test_identity_params_zero_error_data(self, rng):
        seq, _ = synthetic_sequence(ErrorModel.identity(), seed=9, duration_s=6.0)
        stats = compute_norm_stats([seq])
        net = CalibNet(tiny_model_config(window=128), seed=0)
        net.zero_weights()  # delta == 0, C == I: calibrated equals raw truth
        ev = evaluate_sequence(net, seq, stats)
        assert ev.aoe_deg_calibrated < 1e-6
        assert ev.aoe_deg_raw < 1e-6

    def test_constant_bias_ideal_delta(self, rng):
        bias = np.array([0.02, -0.01, 0.015])
        seq, true_omega = synthetic_sequence(ErrorModel(gyro_bias=bias), seed=10,
                                             duration_s=6.0)
        stats = compute_norm_stats([seq])
        omega = seq.gyro - bias  # the analytic correction
        traj = so3.integrate_gyro(seq.gt.rotations[0], omega, seq.t)
        assert so3.aoe(traj, seq.gt) < 1e-6
        # and the uncorrected baseline is far worse
        net = CalibNet(tiny_model_config(window=128), seed=0)
        net.zero_weights()
        ev = evaluate_sequence(net, seq, stats)
        assert ev.aoe_deg_raw > 1.0

    def test_degenerate_net_calibrated_equals_raw(self, rng):
        seq, _ = synthetic_sequence(ErrorModel(gyro_bias=[0.01, 0, 0]), seed=11,
                                    duration_s=6.0)
        stats = compute_norm_stats([seq])
        net = CalibNet(tiny_model_config(window=128), seed=0)
        net.zero_weights()
        ev = evaluate_sequence(net, seq, stats)
        assert abs(ev.aoe_deg_calibrated - ev.aoe_deg_raw) < 1e-12

    def test_evaluate_loss_order_independent(self, rng):
        train_w, val_w, _, _ = _tiny_dataset(rng)
        net = CalibNet(tiny_model_config(), seed=3)
        a = evaluate_loss(net, val_w, (8,))
        b = evaluate_loss(net, val_w[::-1], (8,))
        assert abs(a - b) < 1e-15
