"""Rotation-group math on plain float64 numpy arrays.

Conventions used throughout the package:

* rotation matrices are 3x3 with ``R^T R = I`` and ``det R = +1``, mapping
  body-frame vectors into the world frame;
* rotation vectors are axis-angle 3-vectors, magnitude in radians;
* quaternions are Hamilton convention, scalar first ``(w, x, y, z)``.

All functions accept a single element or a leading batch dimension
(``(..., 3)`` / ``(..., 3, 3)``) and are vectorized over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this angle the sin/(1-cos) ratios switch to series coefficients.
TAYLOR_EPS = 1e-8
# Above pi minus this, the log map switches to the diagonal-based branch.
PI_BRANCH_EPS = 1e-3
# Orthonormality defect beyond which a matrix is rejected as a rotation.
ORTHO_REJECT = 1e-3


class InvalidRotationError(ValueError):
    """Input matrix is too far from SO(3) to recover."""


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite values")


def hat(v) -> np.ndarray:
    """Antisymmetric (cross-product) matrix of a 3-vector: hat(v) @ w == v x w."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 3:
        raise ValueError(f"expected (..., 3) vector, got shape {v.shape}")
    _check_finite(v, "rotation vector")
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = np.zeros_like(x)
    rows = np.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], axis=-1
    )
    return rows.reshape(v.shape[:-1] + (3, 3))


def exp_so3(theta) -> np.ndarray:
    """Rodrigues exponential map: rotation vector -> rotation matrix.

    For magnitudes below ``TAYLOR_EPS`` the sin(t)/t and (1-cos(t))/t^2
    coefficients use their second-order series to avoid 0/0.
    """
    theta = np.asarray(theta, dtype=np.float64)
    W = hat(theta)  # also validates shape and finiteness
    sq = np.einsum("...ij,...jk->...ik", W, W)
    ang = np.linalg.norm(theta, axis=-1)
    small = ang < TAYLOR_EPS
    ang_safe = np.where(small, 1.0, ang)
    a = np.where(small, 1.0 - ang * ang / 6.0, np.sin(ang_safe) / ang_safe)
    b = np.where(small, 0.5 - ang * ang / 24.0, (1.0 - np.cos(ang_safe)) / ang_safe**2)
    eye = np.broadcast_to(np.eye(3), W.shape)
    return eye + a[..., None, None] * W + b[..., None, None] * sq


def orthonormality_defect(R) -> np.ndarray:
    """Frobenius norm of R^T R - I."""
    R = np.asarray(R, dtype=np.float64)
    d = np.einsum("...ji,...jk->...ik", R, R) - np.eye(3)
    return np.linalg.norm(d, axis=(-2, -1))


def project_to_so3(R) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (polar decomposition)."""
    R = np.asarray(R, dtype=np.float64)
    U, _, Vt = np.linalg.svd(R)
    P = U @ Vt
    # A reflection can only appear for inputs nowhere near SO(3); fix the sign.
    det = np.linalg.det(P)
    if np.any(det < 0):
        U = U.copy()
        U[..., :, -1] = np.where((det < 0)[..., None], -U[..., :, -1], U[..., :, -1])
        P = U @ Vt
    return P


def log_so3(R) -> np.ndarray:
    """Inverse of exp_so3; returned magnitude lies in [0, pi].

    Inputs are re-orthonormalized first; a defect beyond ``ORTHO_REJECT``
    (or a negative determinant) raises :class:`InvalidRotationError`.
    Near the angle pi the sine formula is singular, so the axis is
    recovered from the diagonal of the symmetrized matrix instead.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3) matrix, got shape {R.shape}")
    _check_finite(R, "rotation matrix")
    defect = orthonormality_defect(R)
    if np.any(defect > ORTHO_REJECT) or np.any(np.linalg.det(R) < 0.0):
        raise InvalidRotationError(
            f"matrix fails orthonormality by {float(np.max(defect)):.3e} "
            f"(limit {ORTHO_REJECT:.0e}) or has det < 0"
        )
    if np.any(defect > 1e-9):
        R = project_to_so3(R)

    batched = R.ndim > 2
    Rb = R.reshape((-1, 3, 3))
    # 2 v = vee(R - R^T) = 2 sin(angle) * axis
    v = 0.5 * np.stack(
        [
            Rb[:, 2, 1] - Rb[:, 1, 2],
            Rb[:, 0, 2] - Rb[:, 2, 0],
            Rb[:, 1, 0] - Rb[:, 0, 1],
        ],
        axis=-1,
    )
    s = np.linalg.norm(v, axis=-1)
    c = 0.5 * (np.trace(Rb, axis1=-2, axis2=-1) - 1.0)
    ang = np.arctan2(s, c)

    out = np.empty((Rb.shape[0], 3))

    near_pi = ang > np.pi - PI_BRANCH_EPS
    tiny = ~near_pi & (ang < TAYLOR_EPS)
    mid = ~near_pi & ~tiny

    if np.any(tiny):
        # angle/sin(angle) ~ 1 + angle^2/6
        out[tiny] = v[tiny] * (1.0 + ang[tiny, None] ** 2 / 6.0)
    if np.any(mid):
        out[mid] = v[mid] * (ang[mid] / s[mid])[:, None]
    if np.any(near_pi):
        idx = np.nonzero(near_pi)[0]
        for i in idx:
            M = 0.5 * (Rb[i] + Rb[i].T)  # cos*I + (1-cos)*n n^T
            ci = np.cos(ang[i])
            nn = (np.diag(M) - ci) / (1.0 - ci)
            k = int(np.argmax(nn))
            axis = (M[:, k] - ci * np.eye(3)[:, k]) / (1.0 - ci)
            axis = axis / np.linalg.norm(axis)
            # orient with the sine part when it is informative
            if s[i] > 1e-12 and np.dot(axis, v[i]) < 0:
                axis = -axis
            out[i] = ang[i] * axis
    return out.reshape(R.shape[:-2] + (3,)) if batched else out[0]


def relative_increment(R_a, R_b) -> np.ndarray:
    """Rotation taking frame a to frame b: R_a^T @ R_b."""
    R_a = np.asarray(R_a, dtype=np.float64)
    R_b = np.asarray(R_b, dtype=np.float64)
    return np.einsum("...ji,...jk->...ik", R_a, R_b)


@dataclass
class Trajectory:
    """A timestamped orientation sequence.

    ``timestamps`` are seconds, strictly increasing; ``rotations`` is an
    ``(M, 3, 3)`` stack of rotation matrices.
    """

    timestamps: np.ndarray
    rotations: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        if self.timestamps.ndim != 1 or self.rotations.shape != (
            len(self.timestamps),
            3,
            3,
        ):
            raise ValueError(
                f"inconsistent trajectory shapes {self.timestamps.shape} vs "
                f"{self.rotations.shape}"
            )
        if len(self.timestamps) < 1:
            raise ValueError("trajectory must contain at least one pose")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.timestamps)

    def slice(self, start: int, stop: int) -> "Trajectory":
        return Trajectory(self.timestamps[start:stop], self.rotations[start:stop])


def integrate_gyro(R0, omega, timestamps) -> Trajectory:
    """Open-loop attitude integration R(n) = R(n-1) @ exp(omega_n * dt_n).

    ``omega`` is (N, 3) rad/s, ``timestamps`` (N,) seconds, strictly
    increasing; the first sample only anchors the time axis.  Accumulated
    round-off is repaired by polar re-orthonormalization every 1000 steps
    and whenever the orthonormality defect exceeds 1e-9.
    """
    omega = np.asarray(omega, dtype=np.float64)
    timestamps = np.asarray(timestamps, dtype=np.float64)
    if omega.ndim != 2 or omega.shape[1] != 3 or omega.shape[0] != len(timestamps):
        raise ValueError(
            f"omega shape {omega.shape} inconsistent with {len(timestamps)} timestamps"
        )
    dts = np.diff(timestamps)
    if np.any(dts <= 0):
        raise ValueError("timestamps must be strictly increasing")
    R0 = np.asarray(R0, dtype=np.float64)
    _check_finite(omega, "angular velocity")

    steps = exp_so3(omega[1:] * dts[:, None])
    out = np.empty((len(timestamps), 3, 3))
    out[0] = R0
    R = R0.copy()
    for n in range(1, len(timestamps)):
        R = R @ steps[n - 1]
        if n % 1000 == 0 or orthonormality_defect(R) > 1e-9:
            R = project_to_so3(R)
        out[n] = R
    return Trajectory(timestamps, out)


def chordal_mean(rotations) -> np.ndarray:
    """L2-chordal average of a stack of rotations: polar(sum R_i)."""
    S = np.sum(np.asarray(rotations, dtype=np.float64), axis=0)
    return project_to_so3(S)


def _yaw_align(S: np.ndarray) -> np.ndarray:
    # best rotation about world z maximizing trace(Rz(psi)^T S)
    psi = np.arctan2(S[1, 0] - S[0, 1], S[0, 0] + S[1, 1])
    cp, sp = np.cos(psi), np.sin(psi)
    return np.array([[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]])


def aoe(est: Trajectory, gt: Trajectory, align: str = "full") -> float:
    """Absolute orientation error in degrees.

    RMS over the sequence of ``|| log(R_gt^T R_align R_est) ||`` after
    fitting a single constant rotation ``R_align``.  ``align`` selects the
    fit: ``"full"`` (closed-form chordal averaging over SO(3), default),
    ``"yaw"`` (rotation about world z only), or ``"none"``.
    """
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if np.max(np.abs(est.timestamps - gt.timestamps)) > 1e-6:
        raise ValueError("trajectory timestamps differ by more than 1e-6 s")
    if align not in ("full", "yaw", "none"):
        raise ValueError(f"unknown alignment mode {align!r}")

    # offsets est_n @ gt_n^T are all equal to the constant Q when est = Q gt
    S = np.einsum("nij,nkj->ik", est.rotations, gt.rotations)
    if align == "full":
        R_align = project_to_so3(S).T
    elif align == "yaw":
        R_align = _yaw_align(S).T
    else:
        R_align = np.eye(3)

    aligned = np.einsum("ij,njk->nik", R_align, est.rotations)
    errs = log_so3(relative_increment(gt.rotations, aligned))
    rms = np.sqrt(np.mean(np.sum(errs**2, axis=-1)))
    return float(np.degrees(rms))


# --------------------------------------------------------------------------
# Quaternion helpers (Hamilton, w-first) and Euler conversions
# --------------------------------------------------------------------------


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def rotmat_from_quat(q) -> np.ndarray:
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = np.stack(
        [
            1 - 2 * (y * y + z * z),
            2 * (x * y - w * z),
            2 * (x * z + w * y),
            2 * (x * y + w * z),
            1 - 2 * (x * x + z * z),
            2 * (y * z - w * x),
            2 * (x * z - w * y),
            2 * (y * z + w * x),
            1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return rows.reshape(q.shape[:-1] + (3, 3))


def quat_from_rotmat(R) -> np.ndarray:
    """Rotation matrix -> unit quaternion, w >= 0 (Shepperd's branching)."""
    R = np.asarray(R, dtype=np.float64)
    batched = R.ndim > 2
    Rb = R.reshape((-1, 3, 3))
    n = Rb.shape[0]
    q = np.empty((n, 4))
    tr = np.trace(Rb, axis1=-2, axis2=-1)
    # candidate squared components, each >= 0 for a valid rotation
    cand = np.stack(
        [1.0 + tr, 1.0 + 2.0 * Rb[:, 0, 0] - tr, 1.0 + 2.0 * Rb[:, 1, 1] - tr,
         1.0 + 2.0 * Rb[:, 2, 2] - tr],
        axis=-1,
    )
    best = np.argmax(cand, axis=-1)
    for i in range(n):
        b = best[i]
        M = Rb[i]
        t = np.sqrt(cand[i, b])
        if b == 0:
            q[i] = [t / 2, (M[2, 1] - M[1, 2]) / (2 * t),
                    (M[0, 2] - M[2, 0]) / (2 * t), (M[1, 0] - M[0, 1]) / (2 * t)]
        elif b == 1:
            q[i] = [(M[2, 1] - M[1, 2]) / (2 * t), t / 2,
                    (M[0, 1] + M[1, 0]) / (2 * t), (M[0, 2] + M[2, 0]) / (2 * t)]
        elif b == 2:
            q[i] = [(M[0, 2] - M[2, 0]) / (2 * t), (M[0, 1] + M[1, 0]) / (2 * t),
                    t / 2, (M[1, 2] + M[2, 1]) / (2 * t)]
        else:
            q[i] = [(M[1, 0] - M[0, 1]) / (2 * t), (M[0, 2] + M[2, 0]) / (2 * t),
                    (M[1, 2] + M[2, 1]) / (2 * t), t / 2]
        if q[i, 0] < 0:
            q[i] = -q[i]
    q = quat_normalize(q)
    return q.reshape(R.shape[:-2] + (4,)) if batched else q[0]


def slerp(q0, q1, u: float) -> np.ndarray:
    """Spherical linear interpolation between unit quaternions, u in [0, 1]."""
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:  # take the short arc
        q1 = -q1
        dot = -dot
    dot = min(dot, 1.0)
    ang = np.arccos(dot)
    if ang < 1e-9:
        return quat_normalize(q0 + u * (q1 - q0))
    s = np.sin(ang)
    return quat_normalize(
        (np.sin((1.0 - u) * ang) / s) * q0 + (np.sin(u * ang) / s) * q1
    )


def euler_zyx(R) -> np.ndarray:
    """Intrinsic Z-Y-X (yaw-pitch-roll) angles in radians, returned (roll, pitch, yaw)."""
    R = np.asarray(R, dtype=np.float64)
    pitch = -np.arcsin(np.clip(R[..., 2, 0], -1.0, 1.0))
    roll = np.arctan2(R[..., 2, 1], R[..., 2, 2])
    yaw = np.arctan2(R[..., 1, 0], R[..., 0, 0])
    return np.stack([roll, pitch, yaw], axis=-1)


def rotmat_from_euler_zyx(roll: float, pitch: float, yaw: float) -> np.ndarray:
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1.0]])
    Ry = np.array([[cp, 0, sp], [0, 1.0, 0], [-sp, 0, cp]])
    Rx = np.array([[1.0, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return Rz @ Ry @ Rx


# --------------------------------------------------------------------------
# Trajectory CSV round trip: `timestamp_s, qw, qx, qy, qz`
# --------------------------------------------------------------------------

TRAJECTORY_HEADER = "timestamp_s,qw,qx,qy,qz"


def save_trajectory_csv(path, traj: Trajectory) -> None:
    quats = quat_from_rotmat(traj.rotations)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(TRAJECTORY_HEADER + "\n")
        for t, q in zip(traj.timestamps, quats):
            cells = ",".join(repr(float(x)) for x in (t, q[0], q[1], q[2], q[3]))
            fh.write(cells + "\n")


def load_trajectory_csv(path) -> Trajectory:
    ts = []
    quats = []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != TRAJECTORY_HEADER:
            raise ValueError(f"unexpected trajectory header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields")
            vals = [float(p) for p in parts]
            ts.append(vals[0])
            quats.append(vals[1:])
    return Trajectory(np.array(ts), rotmat_from_quat(np.array(quats)))
