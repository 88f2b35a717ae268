"""End-to-end training and evaluation.

The loss compares rotation increments rather than raw angular velocities:
for each horizon t the window is cut into disjoint strides of t samples,
the calibrated rates are composed into an estimated increment through the
exponential map, and the log-cosh of each component of
``log(dR_gt @ dR_est^T)`` is accumulated, normalized by the number of
increments.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import so3, tape
from .dataset import NormStats, Sequence, Window, augment, make_windows
from .errors import ConfigError, NumericError
from .model import CalibNet, ModelConfig, build_net, calibrate
from .optim import Adam, PlateauScheduler
from .tape import Tensor


@dataclass
class TrainConfig:
    lr: float = 8e-4
    weight_decay: float = 0.1
    dropout: float = 0.1
    epochs: int = 4000
    horizons: tuple[int, ...] = (16, 32)
    aug_noise: float = 0.01        # std on the normalized channels
    seed: int = 0
    window: int = 16000
    stride: int = 0                # 0 = window // 4
    batch_size: int = 0            # 0 = all training windows per step
    train_seconds: float = 50.0
    scheduler_factor: float = 0.5
    scheduler_patience: int = 100
    scheduler_threshold: float = 1e-4
    scheduler_min_lr: float = 1e-6
    norm_per_sequence: bool = False

    def __post_init__(self):
        self.horizons = tuple(int(h) for h in self.horizons)
        if not self.horizons or any(h < 1 or h > self.window for h in self.horizons):
            raise ConfigError("loss horizons must satisfy 1 <= t <= window")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def effective_stride(self) -> int:
        return self.stride if self.stride > 0 else max(self.window // 4, 1)


_TRAIN_INT = {"epochs", "seed", "window", "stride", "batch_size", "scheduler_patience"}
_TRAIN_FLOAT = {"lr", "weight_decay", "dropout", "aug_noise", "train_seconds",
                "scheduler_factor", "scheduler_threshold", "scheduler_min_lr"}
_TRAIN_BOOL = {"norm_per_sequence"}
_TRAIN_TUPLE = {"horizons"}
TRAIN_CONFIG_KEYS = _TRAIN_INT | _TRAIN_FLOAT | _TRAIN_BOOL | _TRAIN_TUPLE


def train_config_from_dict(raw: dict[str, str]) -> TrainConfig:
    kwargs = {}
    for key, value in raw.items():
        if key not in TRAIN_CONFIG_KEYS:
            continue
        try:
            if key in _TRAIN_TUPLE:
                kwargs[key] = tuple(int(v) for v in value.split(","))
            elif key in _TRAIN_INT:
                kwargs[key] = int(value)
            elif key in _TRAIN_FLOAT:
                kwargs[key] = float(value)
            else:
                kwargs[key] = value.lower() in ("true", "1", "yes", "on")
        except ValueError:
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    return TrainConfig(**kwargs)


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainReport:
    rows: list[EpochRow] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("epoch,train_loss,val_loss,lr,seconds\n")
            for r in self.rows:
                fh.write(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.lr!r},"
                         f"{r.seconds:.3f}\n")


@dataclass
class TrainResult:
    net: CalibNet
    best_state: dict[str, np.ndarray]
    report: TrainReport


def increment_loss(omega_tilde: Tensor, timestamps, gt_rotations,
                   horizons, start: int = 0) -> Tensor:
    """Multi-horizon rotation-increment log-cosh loss; differentiable in
    ``omega_tilde`` (shape (3, N)); ground truth enters as constants.

    ``start`` skips left-padded samples of padded windows.
    """
    timestamps = np.asarray(timestamps, dtype=np.float64)
    gt_rotations = np.asarray(gt_rotations, dtype=np.float64)
    n = omega_tilde.shape[1]
    if len(timestamps) != n or gt_rotations.shape != (n, 3, 3):
        raise ValueError("omega, timestamps and ground truth lengths disagree")
    dts = np.diff(timestamps)
    # row i of theta_rows is the increment advancing pose i -> i+1
    theta = omega_tilde[:, 1:] * dts  # (3, N-1), broadcast over rows
    theta_rows = theta.transpose_last2()

    terms = []
    count = 0
    for t in horizons:
        t = int(t)
        if t < 1 or t > n:
            raise ValueError(f"horizon {t} outside [1, {n}]")
        k = (n - 1 - start) // t
        if k == 0:
            continue
        block = theta_rows[start : start + k * t].reshape(k, t, 3)
        rots = tape.so3_exp(block.reshape(k * t, 3)).reshape((k, t, 3, 3))
        est = rots[:, 0]
        for j in range(1, t):
            est = est @ rots[:, j]
        starts = start + np.arange(k) * t
        d_gt = so3.relative_increment(gt_rotations[starts], gt_rotations[starts + t])
        resid = tape.matmul(tape.Tensor(d_gt), est.transpose_last2())
        terms.append(tape.logcosh(tape.so3_log(resid)).sum())
        count += k
    if count == 0:
        raise ValueError("no complete increment fits in the window")
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / count)


def _window_loss(net: CalibNet, window: Window, horizons, training: bool,
                 rng=None) -> Tensor:
    delta = net.forward(window.data, training=training, rng=rng)
    omega = calibrate(window.raw_gyro, delta, net.c_omega)
    return increment_loss(omega, window.timestamps, window.gt.rotations,
                          horizons, start=window.pad)


def _first_nonfinite_grad(net: CalibNet) -> str | None:
    for name, p in net.params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return name
    return None


def train(train_windows: list[Window], val_windows: list[Window],
          model_config: ModelConfig, cfg: TrainConfig) -> TrainResult:
    """Full training loop; deterministic given the config seed.

    Each epoch re-augments the training windows with an epoch-derived
    seed, accumulates gradients over a batch (all windows by default),
    steps Adam, then scores the validation windows in eval mode for the
    plateau scheduler.  The best-validation state is retained.
    """
    if not train_windows or not val_windows:
        raise ValueError("need at least one training and one validation window")
    net = build_net(model_config, seed=cfg.seed, dropout=cfg.dropout)
    opt = Adam(net.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = PlateauScheduler(opt, factor=cfg.scheduler_factor,
                             patience=cfg.scheduler_patience,
                             threshold=cfg.scheduler_threshold,
                             min_lr=cfg.scheduler_min_lr)
    report = TrainReport()
    best_state = net.state_arrays()
    noise = np.full(6, cfg.aug_noise)

    order = np.arange(len(train_windows))
    for epoch in range(1, cfg.epochs + 1):
        tic = time.perf_counter()
        if cfg.batch_size > 0:
            shuffle_rng = np.random.default_rng([cfg.seed, 104729, epoch])
            order = shuffle_rng.permutation(len(train_windows))
        batches = (
            [order]
            if cfg.batch_size <= 0
            else [order[i : i + cfg.batch_size]
                  for i in range(0, len(order), cfg.batch_size)]
        )

        train_loss = 0.0
        for batch in batches:
            opt.zero_grad()
            for wi in batch:
                w = train_windows[int(wi)]
                if cfg.aug_noise > 0:
                    seed_seq = np.random.SeedSequence([cfg.seed, 15485863, epoch, int(wi)])
                    w = augment(w, noise, int(seed_seq.generate_state(1)[0]))
                drop_rng = np.random.default_rng([cfg.seed, 7919, epoch, int(wi)])
                loss = _window_loss(net, w, cfg.horizons, training=True, rng=drop_rng)
                if not np.isfinite(loss.data):
                    raise NumericError(f"non-finite training loss at epoch {epoch}")
                (loss * (1.0 / len(batch))).backward()
                train_loss += float(loss.data)
            bad = _first_nonfinite_grad(net)
            if bad is not None:
                raise NumericError(
                    f"non-finite gradient for parameter {bad!r} at epoch {epoch}"
                )
            opt.step()
        train_loss /= len(train_windows)

        val_loss = evaluate_loss(net, val_windows, cfg.horizons)
        if not np.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        lr_now = sched.step(val_loss)
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best_state = net.state_arrays()
        report.rows.append(EpochRow(epoch, train_loss, val_loss, lr_now,
                                    time.perf_counter() - tic))
    return TrainResult(net=net, best_state=best_state, report=report)


def evaluate_loss(net: CalibNet, windows: list[Window], horizons) -> float:
    """Mean eval-mode increment loss over windows (no gradients taped)."""
    with tape.no_grad():
        losses = [float(_window_loss(net, w, horizons, training=False).data)
                  for w in windows]
    return float(np.mean(losses))


@dataclass
class SequenceEval:
    name: str
    aoe_deg_calibrated: float
    aoe_deg_raw: float | None
    timestamps: np.ndarray
    gt: so3.Trajectory
    calibrated: so3.Trajectory
    raw: so3.Trajectory | None


def calibrated_rates(net: CalibNet, seq: Sequence, stats: NormStats) -> tuple[np.ndarray, int]:
    """Eval-mode corrected angular velocity over the window-covered prefix.

    Returns (omega_tilde (M, 3), covered M).  Windows are non-overlapping
    at the configured length; trailing samples that do not fill a window
    are left out.  A sequence shorter than one window is handled through
    the padded-window path.
    """
    n = net.config.window
    windows = make_windows(seq, stats, n, stride=n)
    parts = []
    with tape.no_grad():
        for w in windows:
            delta = net.forward(w.data, training=False)
            omega = calibrate(w.raw_gyro, delta, net.c_omega)
            parts.append(omega.data[:, w.pad :])
    full = np.concatenate(parts, axis=1).T
    return full, full.shape[0]


def evaluate_sequence(net: CalibNet, seq: Sequence, stats: NormStats,
                      raw_baseline: bool = True, align: str = "full") -> SequenceEval:
    """Open-loop attitude over one sequence, calibrated and (optionally) raw.

    Integration starts from the ground-truth orientation at the first
    covered sample; the error metric aligns a single constant rotation
    before the RMS.
    """
    omega, covered = calibrated_rates(net, seq, stats)
    t = seq.t[:covered]
    gt = seq.gt.slice(0, covered)
    r0 = gt.rotations[0]
    cal_traj = so3.integrate_gyro(r0, omega, t)
    result = SequenceEval(
        name=seq.name,
        aoe_deg_calibrated=so3.aoe(cal_traj, gt, align=align),
        aoe_deg_raw=None,
        timestamps=t,
        gt=gt,
        calibrated=cal_traj,
        raw=None,
    )
    if raw_baseline:
        raw_traj = so3.integrate_gyro(r0, seq.gyro[:covered], t)
        result.raw = raw_traj
        result.aoe_deg_raw = so3.aoe(raw_traj, gt, align=align)
    return result
