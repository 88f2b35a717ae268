"""Loading, alignment, normalization, and windowing of IMU recordings.

Supported on-disk layouts are the EuRoC-style CSV pair (7-column IMU file,
ground-truth file with a position + w-first quaternion block) found either
directly in a sequence directory (``imu.csv`` / ``gt.csv``) or under the
``mav0/imu0/data.csv`` / ``mav0/state_groundtruth_estimate0/data.csv``
tree.  Timestamps are nanosecond integers at rest and become float64
seconds relative to the first retained IMU sample once loaded.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import so3
from .errors import AlignmentError, DataError, ParseError
from .so3 import Trajectory

GYRO_LIMIT = 50.0      # rad/s, sanity bound on any single gyro sample
ACCEL_LIMIT = 200.0    # m/s^2, sanity bound on any single accel sample
STD_FLOOR = 1e-8


class ImuSample(NamedTuple):
    t: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass
class GroundTruthPose:
    t: float
    rotation: np.ndarray


@dataclass
class Sequence:
    """An IMU recording with ground truth resampled onto its timestamps."""

    name: str
    t: np.ndarray        # (N,) seconds, strictly increasing
    gyro: np.ndarray     # (N, 3) rad/s
    accel: np.ndarray    # (N, 3) m/s^2
    gt: Trajectory       # length N, same timestamps

    def __post_init__(self):
        n = len(self.t)
        if self.gyro.shape != (n, 3) or self.accel.shape != (n, 3) or len(self.gt) != n:
            raise ValueError("sequence arrays are inconsistent")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("sequence timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.t)

    def imu_samples(self) -> list[ImuSample]:
        return [ImuSample(float(t), g, a) for t, g, a in zip(self.t, self.gyro, self.accel)]


@dataclass
class NormStats:
    """Per-channel mean/std over the 6 input channels (gyro xyz, accel xyz)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(6)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64).reshape(6), STD_FLOOR)

    def apply(self, channels: np.ndarray) -> np.ndarray:
        """Normalize a (6, N) channel block."""
        return (channels - self.mean[:, None]) / self.std[:, None]

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            json.dump({"mean": self.mean.tolist(), "std": self.std.tolist()}, fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "NormStats":
        with open(path, "r", encoding="ascii") as fh:
            raw = json.load(fh)
        return cls(np.array(raw["mean"]), np.array(raw["std"]))


@dataclass
class Window:
    """A fixed-length training/evaluation slice of a sequence.

    ``data`` is the normalized (6, N) input block; ``raw_gyro`` keeps the
    unnormalized gyro for the calibration output path.  ``pad`` counts
    left zero-padded samples when the source was shorter than N.
    """

    data: np.ndarray
    raw_gyro: np.ndarray
    timestamps: np.ndarray
    gt: Trajectory
    pad: int = 0

    @property
    def n(self) -> int:
        return self.data.shape[1]


# --------------------------------------------------------------------------
# CSV parsing
# --------------------------------------------------------------------------


def _read_numeric_csv(path, n_cols: int, what: str) -> np.ndarray:
    """Read a comma-separated numeric file, skipping '#'/header lines."""
    rows = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot open {what} file {path}: {e}") from e
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if lineno == 1 and any(_not_number(p) for p in parts):
                continue  # header line
            if len(parts) < n_cols:
                raise ParseError(f"{path}:{lineno}: expected {n_cols} columns, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts[:n_cols]])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric field") from None
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64)


def _not_number(s: str) -> bool:
    try:
        float(s)
        return False
    except ValueError:
        return True


def _find_file(root: str, candidates: list[str], what: str) -> str:
    for rel in candidates:
        path = os.path.join(root, rel)
        if os.path.isfile(path):
            return path
    raise DataError(f"no {what} file under {root} (tried {', '.join(candidates)})")


_IMU_CANDIDATES = ["imu.csv", os.path.join("mav0", "imu0", "data.csv"),
                   os.path.join("imu0", "data.csv")]
_GT_CANDIDATES = ["gt.csv", os.path.join("mav0", "state_groundtruth_estimate0", "data.csv"),
                  os.path.join("state_groundtruth_estimate0", "data.csv"),
                  os.path.join("mav0", "mocap0", "data.csv")]


def load_sequence(directory, fmt: str = "euroc", name: str | None = None) -> Sequence:
    """Load one recording and interpolate its ground truth onto IMU times.

    Both supported formats share the column layout: IMU rows are
    ``ns, wx, wy, wz, ax, ay, az`` and ground-truth rows carry the
    timestamp, a position triple, then the w-first quaternion.  IMU
    samples outside the ground-truth span are dropped.
    """
    if fmt not in ("euroc", "tumvi"):
        raise ValueError(f"unknown dataset format {fmt!r}")
    imu_path = _find_file(str(directory), _IMU_CANDIDATES, "IMU")
    gt_path = _find_file(str(directory), _GT_CANDIDATES, "ground-truth")

    imu = _read_numeric_csv(imu_path, 7, "IMU")
    gt = _read_numeric_csv(gt_path, 8, "ground-truth")

    gyro = imu[:, 1:4]
    accel = imu[:, 4:7]
    bad = np.linalg.norm(gyro, axis=1) >= GYRO_LIMIT
    if np.any(bad):
        raise ParseError(f"{imu_path}: gyro magnitude over {GYRO_LIMIT} rad/s "
                         f"at data row {int(np.argmax(bad)) + 1}")
    bad = np.linalg.norm(accel, axis=1) >= ACCEL_LIMIT
    if np.any(bad):
        raise ParseError(f"{imu_path}: accel magnitude over {ACCEL_LIMIT} m/s^2 "
                         f"at data row {int(np.argmax(bad)) + 1}")
    if not np.all(np.isfinite(imu)) or not np.all(np.isfinite(gt)):
        raise ParseError(f"{imu_path} or {gt_path}: non-finite values")

    imu_ns = imu[:, 0]
    gt_ns = gt[:, 0]
    if np.any(np.diff(imu_ns) <= 0):
        raise ParseError(f"{imu_path}: timestamps not strictly increasing")
    if np.any(np.diff(gt_ns) <= 0):
        raise ParseError(f"{gt_path}: timestamps not strictly increasing")

    keep = (imu_ns >= gt_ns[0]) & (imu_ns <= gt_ns[-1])
    if not np.any(keep):
        raise AlignmentError(
            f"{directory}: IMU and ground-truth time spans do not overlap"
        )
    imu_ns = imu_ns[keep]
    gyro = gyro[keep]
    accel = accel[keep]

    # seconds relative to the first retained IMU sample
    t0_ns = imu_ns[0]
    t = (imu_ns - t0_ns) * 1e-9
    gt_t = (gt_ns - t0_ns) * 1e-9

    dts = np.diff(t)
    if len(dts) and np.max(dts) > 10.0 * np.median(dts):
        raise AlignmentError(
            f"{directory}: IMU gap of {np.max(dts):.4f}s exceeds 10x the "
            f"median interval {np.median(dts):.4f}s"
        )

    quats = so3.quat_normalize(gt[:, 4:8])
    poses = [GroundTruthPose(float(ti), Ri)
             for ti, Ri in zip(gt_t, so3.rotmat_from_quat(quats))]
    traj = interpolate_gt(poses, t)
    return Sequence(
        name=name or os.path.basename(os.path.normpath(str(directory))),
        t=t, gyro=gyro, accel=accel, gt=traj,
    )


def interpolate_gt(poses: list[GroundTruthPose], query_times) -> Trajectory:
    """Slerp ground-truth poses onto query times.

    Query times must lie inside the pose span; a query within 1e-9 s of a
    pose timestamp returns that pose exactly.
    """
    query_times = np.asarray(query_times, dtype=np.float64)
    times = np.array([p.t for p in poses])
    if np.any(np.diff(times) <= 0):
        raise ValueError("pose timestamps must be strictly increasing")
    if np.any(query_times < times[0] - 1e-9) or np.any(query_times > times[-1] + 1e-9):
        raise AlignmentError("query time outside the ground-truth span")
    quats = so3.quat_from_rotmat(np.stack([p.rotation for p in poses]))

    out = np.empty((len(query_times), 4))
    hi = np.searchsorted(times, query_times)
    for i, (tq, h) in enumerate(zip(query_times, hi)):
        h = min(max(h, 1), len(times) - 1)
        lo = h - 1
        if abs(tq - times[lo]) <= 1e-9:
            out[i] = quats[lo]
        elif abs(tq - times[h]) <= 1e-9:
            out[i] = quats[h]
        else:
            u = (tq - times[lo]) / (times[h] - times[lo])
            out[i] = so3.slerp(quats[lo], quats[h], u)
    return Trajectory(query_times, so3.rotmat_from_quat(out))


# --------------------------------------------------------------------------
# normalization, windowing, augmentation
# --------------------------------------------------------------------------


def _channels(seq: Sequence) -> np.ndarray:
    return np.concatenate([seq.gyro, seq.accel], axis=1).T  # (6, N)


def compute_norm_stats(sequences: list[Sequence]) -> NormStats:
    """Pooled per-channel mean/std over all samples (population convention)."""
    if not sequences:
        raise ValueError("need at least one sequence")
    pooled = np.concatenate([_channels(s) for s in sequences], axis=1)
    if pooled.shape[1] < 2:
        raise ValueError("need at least two samples to compute statistics")
    return NormStats(pooled.mean(axis=1), pooled.std(axis=1))


def make_windows(seq: Sequence, stats: NormStats, n: int, stride: int) -> list[Window]:
    """Cut a sequence into fixed-length windows of normalized channels.

    Starts advance by ``stride``; a trailing partial window is dropped.  A
    sequence shorter than ``n`` yields a single left-zero-padded window
    with ``pad`` recording the synthetic sample count.
    """
    if n < 2:
        raise ValueError(f"window length must be >= 2, got {n}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    channels = stats.apply(_channels(seq))
    total = len(seq)

    if total < n:
        pad = n - total
        med_dt = float(np.median(np.diff(seq.t))) if total > 1 else 0.005
        data = np.zeros((6, n))
        data[:, pad:] = channels
        raw = np.zeros((3, n))
        raw[:, pad:] = seq.gyro.T
        ts = np.concatenate([seq.t[0] - med_dt * np.arange(pad, 0, -1), seq.t])
        rots = np.concatenate(
            [np.repeat(seq.gt.rotations[:1], pad, axis=0), seq.gt.rotations]
        )
        return [Window(data, raw, ts, Trajectory(ts, rots), pad=pad)]

    windows = []
    for start in range(0, total - n + 1, stride):
        stop = start + n
        windows.append(
            Window(
                data=channels[:, start:stop].copy(),
                raw_gyro=seq.gyro.T[:, start:stop].copy(),
                timestamps=seq.t[start:stop].copy(),
                gt=seq.gt.slice(start, stop),
            )
        )
    return windows


def augment(window: Window, noise_std, seed: int) -> Window:
    """Add zero-mean Gaussian noise to the normalized channels.

    ``noise_std`` is a per-channel 6-vector (or scalar); the ground truth
    and the raw gyro are left untouched.  Deterministic given the seed.
    """
    noise_std = np.broadcast_to(np.asarray(noise_std, dtype=np.float64), (6,))
    if np.any(noise_std < 0):
        raise ValueError("noise std must be non-negative")
    if not np.any(noise_std > 0):
        return window
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(window.data.shape) * noise_std[:, None]
    return replace(window, data=window.data + noise)


def split_sequence(seq: Sequence, train_seconds: float = 50.0) -> tuple[Sequence, Sequence | None]:
    """Head/tail split at ``train_seconds`` from the first sample."""
    cut = int(np.searchsorted(seq.t, seq.t[0] + train_seconds, side="right"))
    cut = min(cut, len(seq))
    if cut < 2:
        raise ValueError(f"{seq.name}: fewer than 2 samples before the split point")
    head = Sequence(seq.name + ":train", seq.t[:cut], seq.gyro[:cut],
                    seq.accel[:cut], seq.gt.slice(0, cut))
    if len(seq) - cut < 2:
        return head, None
    tail = Sequence(seq.name + ":val", seq.t[cut:], seq.gyro[cut:],
                    seq.accel[cut:], seq.gt.slice(cut, len(seq)))
    return head, tail


# --------------------------------------------------------------------------
# writers (the synthetic generator emits the same layout this module reads)
# --------------------------------------------------------------------------

IMU_HEADER = ("#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],"
              "w_RS_S_z [rad s^-1],a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],"
              "a_RS_S_z [m s^-2]")
GT_HEADER = ("#timestamp [ns],p_RS_R_x [m],p_RS_R_y [m],p_RS_R_z [m],"
             "q_RS_w [],q_RS_x [],q_RS_y [],q_RS_z []")


def write_imu_csv(path, t_s, gyro, accel) -> None:
    ns = np.round(np.asarray(t_s, dtype=np.float64) * 1e9).astype(np.int64)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(IMU_HEADER + "\n")
        for i in range(len(ns)):
            cells = ",".join(repr(float(x)) for x in (*gyro[i], *accel[i]))
            fh.write(f"{ns[i]},{cells}\n")


def write_gt_csv(path, t_s, rotations) -> None:
    ns = np.round(np.asarray(t_s, dtype=np.float64) * 1e9).astype(np.int64)
    quats = so3.quat_from_rotmat(np.asarray(rotations))
    with open(path, "w", encoding="ascii") as fh:
        fh.write(GT_HEADER + "\n")
        for i in range(len(ns)):
            cells = ",".join(repr(float(x)) for x in quats[i])
            fh.write(f"{ns[i]},0.0,0.0,0.0,{cells}\n")
