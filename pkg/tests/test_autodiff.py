"""Gradient checks for every taped primitive, optimizer and scheduler
behavior, and the checkpoint container."""

import math

import numpy as np
import pytest

from conftest import check_grads, random_rotvecs
from gyrocal import tape
from gyrocal.checkpoint import load_checkpoint, save_checkpoint
from gyrocal.optim import Adam, PlateauScheduler
from gyrocal.tape import (GraphReuseError, RunningStats, ShapeError, Tensor,
                          batch_norm1d, conv1d, dropout, gelu, logcosh)


def weighted_sum(x, rng):
    """Scalarize with fixed random weights so gradients are O(1)."""
    return (x * Tensor(rng.normal(size=x.shape))).sum()


class TestConv1d:
    def test_identity_kernel_depthwise(self, rng):
        x = rng.normal(size=(5, 12))
        w = np.ones((5, 1, 1))
        out = conv1d(Tensor(x), Tensor(w), groups=5)
        assert np.array_equal(out.data, x)

    def test_hand_summation(self):
        x = Tensor(np.array([[1.0, 2.0, 3.0, 4.0]]))
        w = Tensor(np.array([[[1.0, 1.0]]]))
        out = conv1d(x, w, padding="none")
        assert np.array_equal(out.data, [[3.0, 5.0, 7.0]])

    def test_causal_preserves_length_and_past_only(self, rng):
        x = rng.normal(size=(3, 40))
        w = Tensor(rng.normal(size=(6, 3, 5)))
        base = conv1d(Tensor(x), w, dilation=3).data
        assert base.shape == (6, 40)
        bumped = x.copy()
        bumped[:, 25] += 10.0
        out = conv1d(Tensor(bumped), w, dilation=3).data
        assert np.array_equal(out[:, :25], base[:, :25])
        assert not np.array_equal(out[:, 25:], base[:, 25:])

    def test_group_decomposition(self, rng):
        x = rng.normal(size=(6, 15))
        w = rng.normal(size=(4, 3, 3))
        b = rng.normal(size=4)
        grouped = conv1d(Tensor(x), Tensor(w), Tensor(b), groups=2, dilation=2).data
        # oracle: each group is an independent ungrouped convolution
        top = conv1d(Tensor(x[:3]), Tensor(w[:2]), Tensor(b[:2]), dilation=2).data
        bot = conv1d(Tensor(x[3:]), Tensor(w[2:]), Tensor(b[2:]), dilation=2).data
        assert np.max(np.abs(grouped - np.concatenate([top, bot]))) < 1e-12

    def test_gradients(self, rng):
        for trial in range(8):
            g = int(rng.choice([1, 2, 4]))
            c_in = g * int(rng.integers(1, 3))
            c_out = g * int(rng.integers(1, 3))
            k = int(rng.choice([1, 3]))
            d = int(rng.integers(1, 3))
            length = int(rng.integers(k * d + 2, 14))
            pad = str(rng.choice(["causal", "none"]))
            x = Tensor(rng.normal(size=(c_in, length)), requires_grad=True)
            w = Tensor(rng.normal(size=(c_out, c_in // g, k)), requires_grad=True)
            b = Tensor(rng.normal(size=c_out), requires_grad=True)
            out_shape = conv1d(x, w, b, groups=g, dilation=d, padding=pad).shape
            wts = Tensor(rng.normal(size=out_shape))
            check_grads(
                lambda: (conv1d(x, w, b, groups=g, dilation=d, padding=pad) * wts).sum(),
                [x, w, b],
            )

    def test_shape_error_names_shapes(self, rng):
        x = Tensor(rng.normal(size=(4, 10)))
        w = Tensor(rng.normal(size=(4, 3, 3)))
        with pytest.raises(ShapeError, match=r"\(4, 10\)"):
            conv1d(x, w, groups=2)


class TestBatchNorm:
    def test_already_normalized_passthrough(self, rng):
        x = rng.uniform(-1.7, 1.7, size=(4, 2000))
        x = (x - x.mean(axis=1, keepdims=True)) / x.std(axis=1, keepdims=True)
        out = batch_norm1d(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)),
                           RunningStats(4), training=True)
        assert np.max(np.abs(out.data - x)) < 1e-5  # shift bounded by eps/2 * |x|

    def test_constant_channel_yields_beta(self):
        x = Tensor(np.full((2, 10), 7.0))
        beta = Tensor(np.array([0.5, -1.5]))
        out = batch_norm1d(x, Tensor(np.ones(2)), beta, RunningStats(2), training=True)
        assert np.max(np.abs(out.data - beta.data[:, None])) < 1e-12

    def test_eval_uses_running_stats(self, rng):
        rs = RunningStats(3)
        rs.mean = np.array([1.0, -2.0, 0.5])
        rs.var = np.array([4.0, 1.0, 9.0])
        x = rng.normal(size=(3, 6))
        out = batch_norm1d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                           rs, training=False)
        want = (x - rs.mean[:, None]) / np.sqrt(rs.var[:, None] + 1e-5)
        assert np.max(np.abs(out.data - want)) < 1e-12

    def test_running_update_momentum(self, rng):
        rs = RunningStats(1)
        x = rng.normal(size=(1, 50)) + 3.0
        batch_norm1d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), rs, training=True)
        assert abs(rs.mean[0] - 0.1 * x.mean()) < 1e-12
        assert abs(rs.var[0] - (0.9 + 0.1 * x.var())) < 1e-12

    def test_rejects_single_sample_training(self):
        with pytest.raises(ValueError):
            batch_norm1d(Tensor(np.ones((2, 1))), Tensor(np.ones(2)),
                         Tensor(np.zeros(2)), RunningStats(2), training=True)

    def test_gradients(self, rng):
        for _ in range(6):
            c = int(rng.integers(1, 4))
            length = int(rng.integers(3, 12))
            x = Tensor(rng.normal(size=(c, length)) * 2.0, requires_grad=True)
            gm = Tensor(rng.normal(size=c) + 1.0, requires_grad=True)
            bt = Tensor(rng.normal(size=c), requires_grad=True)
            wts = Tensor(rng.normal(size=(c, length)))
            check_grads(
                lambda: (batch_norm1d(x, gm, bt, RunningStats(c), training=True) * wts).sum(),
                [x, gm, bt],
            )


class TestElementwise:
    def test_gelu_values(self):
        assert gelu(Tensor(0.0)).item() == 0.0
        assert abs(gelu(Tensor(10.0)).item() - 10.0) < 1e-9
        # Phi(1) = 0.8413447460685429, so gelu(1) = 1 * Phi(1)
        assert abs(gelu(Tensor(1.0)).item() - 0.841345) < 1e-6

    def test_gelu_gradients(self, rng):
        for _ in range(4):
            x = Tensor(rng.normal(size=(int(rng.integers(2, 20)),)), requires_grad=True)
            wts = Tensor(rng.normal(size=x.shape))
            check_grads(lambda: (gelu(x) * wts).sum(), [x])

    def test_logcosh_values(self):
        assert logcosh(Tensor(0.0)).item() == 0.0
        assert abs(logcosh(Tensor(100.0)).item() - (100.0 - math.log(2.0))) < 1e-9
        assert abs(logcosh(Tensor(1.0)).item() - math.log(math.cosh(1.0))) < 1e-12
        assert abs(logcosh(Tensor(1.0)).item() - 0.433781) < 1e-6

    def test_logcosh_no_overflow(self):
        assert np.isfinite(logcosh(Tensor(1e6)).item())
        assert abs(logcosh(Tensor(-1e6)).item() - (1e6 - math.log(2.0))) < 1e-6

    def test_logcosh_gradients(self, rng):
        x = Tensor(rng.normal(size=12) * 3.0, requires_grad=True)
        wts = Tensor(rng.normal(size=12))
        check_grads(lambda: (logcosh(x) * wts).sum(), [x])

    def test_mul_requires_equal_shapes(self):
        with pytest.raises(ShapeError):
            tape.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_mul_identities(self, rng):
        a = rng.normal(size=(3, 4))
        ones = np.ones((3, 4))
        assert np.array_equal(tape.mul(Tensor(a), Tensor(ones)).data, a)
        assert np.array_equal(tape.mul(Tensor(np.zeros((3, 4))), Tensor(a)).data,
                              np.zeros((3, 4)))

    def test_mul_gradients(self, rng):
        a = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        check_grads(lambda: tape.mul(a, b).sum(), [a, b], tol=1e-8)


class TestDropout:
    def test_p_zero_identity(self, rng):
        x = Tensor(rng.normal(size=(4, 9)))
        assert dropout(x, 0.0, True, np.random.default_rng(0)) is x

    def test_eval_identity(self, rng):
        x = Tensor(rng.normal(size=(4, 9)))
        assert dropout(x, 0.5, False) is x

    def test_deterministic_given_seed(self, rng):
        x = Tensor(rng.normal(size=(8, 100)))
        a = dropout(x, 0.3, True, np.random.default_rng(99)).data
        b = dropout(x, 0.3, True, np.random.default_rng(99)).data
        assert np.array_equal(a, b)

    def test_statistics(self):
        x = Tensor(np.ones(1_000_000))
        out = dropout(x, 0.1, True, np.random.default_rng(5)).data
        dropped = np.mean(out == 0.0)
        assert abs(dropped - 0.1) < 1e-3
        assert abs(out.mean() - 1.0) < 0.01  # inverted scaling keeps the mean

    def test_gradients_through_mask(self, rng):
        x = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
        wts = Tensor(rng.normal(size=(5, 8)))

        def loss():
            return (dropout(x, 0.4, True, np.random.default_rng(3)) * wts).sum()

        check_grads(loss, [x])


class TestStructuralOps:
    def test_matmul_gradients(self, rng):
        a = Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True)
        wts = Tensor(rng.normal(size=(4, 3, 3)))
        check_grads(lambda: ((a @ b.transpose_last2()) * wts).sum(), [a, b])

    def test_matmul_broadcast_constant(self, rng):
        a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 7)))
        wts = Tensor(rng.normal(size=(3, 7)))
        check_grads(lambda: ((a @ b) * wts).sum(), [a])

    def test_take_reshape_gradients(self, rng):
        a = Tensor(rng.normal(size=(6, 10)), requires_grad=True)
        wts = Tensor(rng.normal(size=(2, 2, 4)))

        def loss():
            return (a[2:4, 1:9].reshape(2, 2, 4) * wts).sum()

        check_grads(loss, [a])

    def test_sum_gradient_is_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        x.sum().backward()
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_quadratic_gradient(self, rng):
        x = Tensor(rng.normal(size=7), requires_grad=True)
        tape.mul(x, x).sum().backward()
        assert np.max(np.abs(x.grad - 2.0 * x.data)) < 1e-12

    def test_gradient_accumulates_across_reuse(self, rng):
        x = Tensor(rng.normal(size=4), requires_grad=True)
        (x + x).sum().backward()
        assert np.array_equal(x.grad, 2.0 * np.ones(4))

    def test_backward_twice_raises(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        loss = x.sum()
        loss.backward()
        with pytest.raises(GraphReuseError):
            loss.backward()

    def test_backward_requires_scalar(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        with pytest.raises(ValueError):
            (x + x).backward()

    def test_no_grad_suppresses_tape(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        with tape.no_grad():
            out = (x * 2.0).sum()
        assert not out.requires_grad


class TestRotationPrimitives:
    def test_so3_exp_matches_plain_map(self, rng):
        from gyrocal import so3

        v = random_rotvecs(rng, 20, max_angle=np.pi - 0.1)
        assert np.max(np.abs(tape.so3_exp(Tensor(v)).data - so3.exp_so3(v))) < 1e-14

    def test_so3_exp_gradients(self, rng):
        for scale in (1.0, 1e-2, 1e-6):
            th = Tensor(rng.normal(size=(3, 3)) * scale, requires_grad=True)
            wts = Tensor(rng.normal(size=(3, 3, 3)))
            check_grads(lambda: (tape.so3_exp(th) * wts).sum(), [th])

    def test_so3_log_round_trip_gradients(self, rng):
        for scale in (0.8, 1e-3):
            th = Tensor(rng.normal(size=(4, 3)) * scale, requires_grad=True)
            wts = Tensor(rng.normal(size=(4, 3)))
            check_grads(lambda: (tape.so3_log(tape.so3_exp(th)) * wts).sum(), [th])

    def test_so3_log_rejects_near_pi(self):
        R = np.diag([1.0, -1.0, -1.0])
        with pytest.raises(ValueError):
            tape.so3_log(Tensor(R[None]))


class TestPrimitiveSweep:
    def test_hundred_random_shapes(self, rng):
        """One hundred randomized gradient checks across the primitive set."""
        ops = ["conv", "bn", "gelu", "logcosh", "mul", "matmul", "dropout", "exp", "log"]
        for i in range(100):
            kind = ops[i % len(ops)]
            if kind == "conv":
                g = int(rng.choice([1, 2]))
                c_in, c_out = g * int(rng.integers(1, 3)), g * int(rng.integers(1, 3))
                k = int(rng.choice([1, 3]))
                d = int(rng.integers(1, 3))
                length = int(rng.integers(k * d + 1, 12))
                x = Tensor(rng.normal(size=(c_in, length)), requires_grad=True)
                w = Tensor(rng.normal(size=(c_out, c_in // g, k)), requires_grad=True)
                b = Tensor(rng.normal(size=c_out), requires_grad=True)
                wts = Tensor(rng.normal(size=conv1d(x, w, b, groups=g, dilation=d).shape))
                check_grads(lambda: (conv1d(x, w, b, groups=g, dilation=d) * wts).sum(),
                            [x, w, b])
            elif kind == "bn":
                c, length = int(rng.integers(1, 4)), int(rng.integers(3, 10))
                x = Tensor(rng.normal(size=(c, length)), requires_grad=True)
                gm = Tensor(rng.normal(size=c) + 1.0, requires_grad=True)
                bt = Tensor(rng.normal(size=c), requires_grad=True)
                wts = Tensor(rng.normal(size=(c, length)))
                check_grads(lambda: (batch_norm1d(x, gm, bt, RunningStats(c),
                                                  training=True) * wts).sum(),
                            [x, gm, bt])
            elif kind in ("gelu", "logcosh"):
                fn = gelu if kind == "gelu" else logcosh
                x = Tensor(rng.normal(size=int(rng.integers(2, 16))) * 2.0,
                           requires_grad=True)
                wts = Tensor(rng.normal(size=x.shape))
                check_grads(lambda: (fn(x) * wts).sum(), [x])
            elif kind == "mul":
                shape = (int(rng.integers(1, 4)), int(rng.integers(1, 6)))
                a = Tensor(rng.normal(size=shape), requires_grad=True)
                b = Tensor(rng.normal(size=shape), requires_grad=True)
                wts = Tensor(rng.normal(size=shape))
                check_grads(lambda: (tape.mul(a, b) * wts).sum(), [a, b])
            elif kind == "matmul":
                n, m, k = (int(rng.integers(1, 4)) for _ in range(3))
                a = Tensor(rng.normal(size=(n, m)), requires_grad=True)
                b = Tensor(rng.normal(size=(m, k)), requires_grad=True)
                wts = Tensor(rng.normal(size=(n, k)))
                check_grads(lambda: ((a @ b) * wts).sum(), [a, b])
            elif kind == "dropout":
                shape = (int(rng.integers(1, 4)), int(rng.integers(2, 8)))
                x = Tensor(rng.normal(size=shape), requires_grad=True)
                wts = Tensor(rng.normal(size=shape))
                seed = int(rng.integers(1 << 30))
                check_grads(lambda: (dropout(x, 0.3, True,
                                             np.random.default_rng(seed)) * wts).sum(),
                            [x])
            elif kind == "exp":
                th = Tensor(rng.normal(size=(2, 3)) * rng.uniform(1e-4, 1.2),
                            requires_grad=True)
                wts = Tensor(rng.normal(size=(2, 3, 3)))
                check_grads(lambda: (tape.so3_exp(th) * wts).sum(), [th])
            else:
                th = Tensor(rng.normal(size=(2, 3)) * rng.uniform(1e-3, 0.8),
                            requires_grad=True)
                wts = Tensor(rng.normal(size=(2, 3)))
                check_grads(lambda: (tape.so3_log(tape.so3_exp(th)) * wts).sum(), [th])


class TestAdam:
    def test_zero_grad_is_noop(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1, weight_decay=0.0)
        p.grad = np.zeros(3)
        before = p.data.copy()
        opt.step()
        assert np.array_equal(p.data, before)

    def test_first_step_unit_magnitude(self):
        # bias correction makes the first step lr * g / (|g| + eps) ~ lr
        p = Tensor(np.array([5.0, -5.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.003, weight_decay=0.0)
        p.grad = np.array([2.0, -0.5])
        before = p.data.copy()
        opt.step()
        delta = p.data - before
        assert np.max(np.abs(np.abs(delta) - 0.003)) < 1e-6
        assert np.sign(delta[0]) == -1.0 and np.sign(delta[1]) == 1.0

    def test_converges_on_quadratic(self):
        w = Tensor(np.array(0.0), requires_grad=True)
        opt = Adam({"w": w}, lr=0.01, weight_decay=0.0)
        for _ in range(2000):
            opt.zero_grad()
            loss = tape.mul(w - 3.0, w - 3.0).sum()
            loss.backward()
            opt.step()
        assert abs(float(w.data) - 3.0) < 1e-3

    def test_decoupled_weight_decay(self):
        p = Tensor(np.array([10.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1, weight_decay=0.5)
        p.grad = np.zeros(1)
        opt.step()
        # decay applies even with zero gradient: p -= lr*wd*p
        assert abs(float(p.data[0]) - 10.0 * (1.0 - 0.1 * 0.5)) < 1e-12


class TestPlateauScheduler:
    def _run(self, losses, patience=100):
        opt = Adam({"p": Tensor(np.zeros(1), requires_grad=True)}, lr=1.0)
        sched = PlateauScheduler(opt, patience=patience)
        trace = [sched.step(v) for v in losses]
        return trace

    def test_decreasing_loss_keeps_lr(self):
        trace = self._run([1.0 / (i + 1) for i in range(300)])
        assert trace[-1] == 1.0

    def test_flat_plateau_halves_once(self):
        trace = self._run([1.0] + [1.0] * 100)
        assert trace[-1] == 0.5
        assert trace[-2] == 1.0

    def test_two_plateaus_two_halvings(self):
        losses = [1.0] + [1.0] * 100 + [0.5] + [0.5] * 100 + [0.4]
        trace = self._run(losses)
        assert trace[-1] == 0.25

    def test_floor(self):
        trace = self._run([1.0] * 5000, patience=10)
        assert trace[-1] == 1e-6


class TestCheckpoint:
    def test_bit_exact_round_trip(self, rng, tmp_path):
        arrays = {
            "a.w": rng.normal(size=(3, 2, 5)),
            "b": np.array(3.141592653589793),
            "c.long_name.with.dots": rng.normal(size=17),
        }
        path = tmp_path / "ck.bin"
        save_checkpoint(path, arrays)
        back = load_checkpoint(path)
        assert list(back) == list(arrays)
        for k in arrays:
            assert back[k].shape == np.asarray(arrays[k]).shape
            assert np.array_equal(back[k], arrays[k])

    def test_identical_content_identical_bytes(self, rng, tmp_path):
        arrays = {"x": rng.normal(size=(4, 4)), "y": rng.normal(size=3)}
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(p1, arrays)
        save_checkpoint(p2, {k: v.copy() for k, v in arrays.items()})
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            load_checkpoint(p)
