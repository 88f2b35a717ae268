"""Synthetic trajectories and IMU corruption with a known error model.

Measurements follow the low-cost IMU output model: the gyro reads
``S_w M_w w + C_x a + b_w + noise`` (scale/misalignment, g-sensitivity,
bias, white noise, optional bias random walk) and the accelerometer reads
``S_a M_a a + b_a + noise``.  Because the injected model is known exactly,
the analytic inverse provides the recovery ceiling that learned
calibration is measured against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import so3
from .dataset import ImuSample
from .so3 import Trajectory

GRAVITY = 9.81  # m/s^2, world frame z-up
SCALE_MISALIGN_LIMIT = 0.10  # max elementwise deviation from identity


class InvalidModelError(ValueError):
    """Error model cannot be inverted (singular scale/misalignment)."""


def _as_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"expected 3x3 matrix, got {m.shape}")
    return m


@dataclass
class ErrorModel:
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_scale_misalign: np.ndarray = field(default_factory=lambda: np.eye(3))
    accel_scale_misalign: np.ndarray = field(default_factory=lambda: np.eye(3))
    g_sensitivity: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    gyro_noise_std: float = 0.0
    accel_noise_std: float = 0.0
    bias_random_walk_std: float = 0.0  # rad/s per sqrt(s), off by default

    def __post_init__(self):
        self.gyro_bias = np.asarray(self.gyro_bias, dtype=np.float64).reshape(3)
        self.accel_bias = np.asarray(self.accel_bias, dtype=np.float64).reshape(3)
        self.gyro_scale_misalign = _as_matrix(self.gyro_scale_misalign)
        self.accel_scale_misalign = _as_matrix(self.accel_scale_misalign)
        self.g_sensitivity = _as_matrix(self.g_sensitivity)
        for name, m in (("gyro", self.gyro_scale_misalign),
                        ("accel", self.accel_scale_misalign)):
            if np.max(np.abs(m - np.eye(3))) > SCALE_MISALIGN_LIMIT:
                raise ValueError(
                    f"{name} scale/misalignment departs from identity by more "
                    f"than {SCALE_MISALIGN_LIMIT:.0%}"
                )
        if self.gyro_noise_std < 0 or self.accel_noise_std < 0 or self.bias_random_walk_std < 0:
            raise ValueError("noise levels must be non-negative")

    @classmethod
    def identity(cls) -> "ErrorModel":
        return cls()

    def save(self, path) -> None:
        payload = {
            "gyro_bias": self.gyro_bias.tolist(),
            "accel_bias": self.accel_bias.tolist(),
            "gyro_scale_misalign": self.gyro_scale_misalign.tolist(),
            "accel_scale_misalign": self.accel_scale_misalign.tolist(),
            "g_sensitivity": self.g_sensitivity.tolist(),
            "gyro_noise_std": self.gyro_noise_std,
            "accel_noise_std": self.accel_noise_std,
            "bias_random_walk_std": self.bias_random_walk_std,
        }
        with open(path, "w", encoding="ascii") as fh:
            json.dump(payload, fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ErrorModel":
        with open(path, "r", encoding="ascii") as fh:
            raw = json.load(fh)
        return cls(
            gyro_bias=np.array(raw.get("gyro_bias", [0, 0, 0])),
            accel_bias=np.array(raw.get("accel_bias", [0, 0, 0])),
            gyro_scale_misalign=np.array(raw.get("gyro_scale_misalign", np.eye(3).tolist())),
            accel_scale_misalign=np.array(raw.get("accel_scale_misalign", np.eye(3).tolist())),
            g_sensitivity=np.array(raw.get("g_sensitivity", np.zeros((3, 3)).tolist())),
            gyro_noise_std=float(raw.get("gyro_noise_std", 0.0)),
            accel_noise_std=float(raw.get("accel_noise_std", 0.0)),
            bias_random_walk_std=float(raw.get("bias_random_walk_std", 0.0)),
        )


PROFILES = ("static", "constant", "sinusoid", "random-smooth")


@dataclass
class SynthScenario:
    duration_s: float = 60.0
    rate_hz: float = 200.0
    profile: str = "random-smooth"
    seed: int = 0
    constant_omega: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.5]))
    sinusoid_amplitude: float = 0.5   # rad/s
    sinusoid_frequency: float = 0.2   # Hz

    def __post_init__(self):
        self.constant_omega = np.asarray(self.constant_omega, dtype=np.float64).reshape(3)
        if self.profile not in PROFILES:
            raise ValueError(f"unknown motion profile {self.profile!r}")
        if self.duration_s * self.rate_hz < 2:
            raise ValueError("scenario must span at least 2 samples")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.rate_hz))


def _smooth_profile(rng: np.random.Generator, t: np.ndarray, scale: float) -> np.ndarray:
    """Band-limited sum of 3-5 sinusoids per axis, below 2 Hz."""
    out = np.zeros((len(t), 3))
    for axis in range(3):
        terms = rng.integers(3, 6)
        freqs = rng.uniform(0.05, 2.0, terms)
        phases = rng.uniform(0.0, 2.0 * np.pi, terms)
        amps = rng.uniform(0.2, 1.0, terms)
        amps *= scale / np.sum(amps)
        for a, f, p in zip(amps, freqs, phases):
            out[:, axis] += a * np.sin(2.0 * np.pi * f * t + p)
    return out


def generate_truth(scenario: SynthScenario) -> tuple[Trajectory, np.ndarray, np.ndarray]:
    """Produce (trajectory, true angular velocity, true specific force).

    The trajectory is exactly the open-loop integral of the emitted
    angular velocity.  The accelerometer truth is the world gravity
    rotated into the body frame plus any profile linear acceleration.
    """
    n = scenario.n_samples
    t = np.arange(n) / scenario.rate_hz
    rng = np.random.default_rng(scenario.seed)

    lin_acc_world = np.zeros((n, 3))
    if scenario.profile == "static":
        omega = np.zeros((n, 3))
    elif scenario.profile == "constant":
        omega = np.tile(scenario.constant_omega, (n, 1))
    elif scenario.profile == "sinusoid":
        omega = np.zeros((n, 3))
        for axis in range(3):
            omega[:, axis] = scenario.sinusoid_amplitude * np.sin(
                2.0 * np.pi * scenario.sinusoid_frequency * t + axis * np.pi / 3.0
            )
    else:  # random-smooth
        omega = _smooth_profile(rng, t, 0.6)
        lin_acc_world = _smooth_profile(rng, t, 0.4)

    traj = so3.integrate_gyro(np.eye(3), omega, t)
    g_world = np.array([0.0, 0.0, -GRAVITY])
    # specific force in the body frame: R^T (a_world - g_world)
    accel = np.einsum("nji,j->ni", traj.rotations, -g_world)
    accel += np.einsum("nji,nj->ni", traj.rotations, lin_acc_world)
    return traj, omega, accel


def corrupt(timestamps, true_omega, true_accel, model: ErrorModel,
            seed: int = 0) -> list[ImuSample]:
    """Apply the error model to ideal measurements.

    Noise terms draw from a generator seeded with ``seed``; with all noise
    levels zero the output is deterministic and seed-independent.
    """
    timestamps = np.asarray(timestamps, dtype=np.float64)
    true_omega = np.asarray(true_omega, dtype=np.float64)
    true_accel = np.asarray(true_accel, dtype=np.float64)
    if not (len(timestamps) == len(true_omega) == len(true_accel)):
        raise ValueError("timestamps, omega and accel lengths differ")
    n = len(timestamps)
    rng = np.random.default_rng(seed)

    gyro = true_omega @ model.gyro_scale_misalign.T
    gyro += true_accel @ model.g_sensitivity.T
    gyro += model.gyro_bias

    if model.bias_random_walk_std > 0:
        dts = np.diff(timestamps, prepend=timestamps[0])
        steps = rng.standard_normal((n, 3)) * (
            model.bias_random_walk_std * np.sqrt(np.maximum(dts, 0.0))[:, None]
        )
        gyro += np.cumsum(steps, axis=0)
    if model.gyro_noise_std > 0:
        gyro = gyro + rng.standard_normal((n, 3)) * model.gyro_noise_std

    accel = true_accel @ model.accel_scale_misalign.T + model.accel_bias
    if model.accel_noise_std > 0:
        accel = accel + rng.standard_normal((n, 3)) * model.accel_noise_std

    return [ImuSample(float(timestamps[i]), gyro[i], accel[i]) for i in range(n)]


def samples_to_arrays(samples: list[ImuSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t = np.array([s.t for s in samples])
    gyro = np.stack([s.gyro for s in samples])
    accel = np.stack([s.accel for s in samples])
    return t, gyro, accel


def ideal_inverse(samples: list[ImuSample], model: ErrorModel) -> np.ndarray:
    """Analytic calibration with the true model (the oracle ceiling).

    Reconstructs the true specific force from the measured accel first,
    then removes g-sensitivity, bias, and scale/misalignment from the
    gyro.  Exact up to injected noise.
    """
    _, gyro, accel = samples_to_arrays(samples)
    try:
        inv_a = np.linalg.inv(model.accel_scale_misalign)
        inv_w = np.linalg.inv(model.gyro_scale_misalign)
    except np.linalg.LinAlgError as e:
        raise InvalidModelError(f"scale/misalignment not invertible: {e}") from e
    a_true = (accel - model.accel_bias) @ inv_a.T
    residual = gyro - model.gyro_bias - a_true @ model.g_sensitivity.T
    return residual @ inv_w.T
