"""Shared fixtures and oracle helpers.

Oracles deliberately avoid the library code paths they check: quaternion
math comes from scipy.spatial.transform, finite differences replace the
tape's backward pass, and brute-force loops replace vectorized metrics.
"""

import numpy as np
import pytest

from gyrocal import synth
from gyrocal.dataset import Sequence
from gyrocal.model import ModelConfig
from gyrocal.synth import SynthScenario, corrupt, generate_truth, samples_to_arrays


def fd_gradient(make_loss, param, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar loss w.r.t. one tensor."""
    num = np.zeros_like(param.data)
    it = np.nditer(param.data, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = param.data[idx]
        param.data[idx] = orig + eps
        lp = float(make_loss().data)
        param.data[idx] = orig - eps
        lm = float(make_loss().data)
        param.data[idx] = orig
        num[idx] = (lp - lm) / (2.0 * eps)
        it.iternext()
    return num


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Elementwise relative error with a unit floor for near-zero entries."""
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b) / scale))


def check_grads(make_loss, params, tol: float = 1e-6, eps: float = 1e-5) -> None:
    for p in params:
        p.zero_grad()
    loss = make_loss()
    loss.backward()
    for p in params:
        assert p.grad is not None, "parameter received no gradient"
        num = fd_gradient(make_loss, p, eps=eps)
        err = rel_err(p.grad, num)
        assert err < tol, f"gradient mismatch {err:.3e} on shape {p.data.shape}"


def random_rotvecs(rng, n, max_angle=np.pi - 1e-3) -> np.ndarray:
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    return axes * rng.uniform(0.0, max_angle, n)[:, None]


def tiny_model_config(window: int = 64, **overrides) -> ModelConfig:
    base = dict(
        window=window,
        dsc_channels=(4, 4, 4, 4),
        dsc_kernels=(3, 3, 3, 3),
        dsc_dilations=(1, 2, 4, 8),
        lka_kernel=3,
        lka_dilated_kernel=3,
        lka_dilation=2,
        dropout=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def synthetic_sequence(error_model: synth.ErrorModel, seed: int,
                       duration_s: float = 30.0, rate_hz: float = 100.0,
                       profile: str = "random-smooth") -> tuple[Sequence, np.ndarray]:
    """A corrupted recording plus its true angular velocity."""
    scenario = SynthScenario(duration_s=duration_s, rate_hz=rate_hz,
                             profile=profile, seed=seed)
    traj, omega, accel = generate_truth(scenario)
    samples = corrupt(traj.timestamps, omega, accel, error_model, seed=seed + 1000)
    t, gyro, accel_m = samples_to_arrays(samples)
    seq = Sequence(f"synth{seed}", t, gyro, accel_m, traj)
    return seq, omega


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
