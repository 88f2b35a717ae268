"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array; every operation records a backward
closure on its output, so each forward pass tapes a fresh graph.  Calling
``backward()`` on a scalar result walks the tape in reverse topological
order and accumulates ``grad`` buffers on every tensor that requires one.
Graphs are single use: a second ``backward()`` on the same result raises.

Only the primitives the calibration network needs are provided; there is
no broadcasting machinery beyond what numpy gives these ops for free.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_LOG2 = np.log(2.0)

_grad_enabled = True


class no_grad:
    """Context manager suppressing tape recording (for eval passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class GraphReuseError(RuntimeError):
    """backward() called twice on the same taped graph."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent; message names both shapes."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_spent")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._spent = False

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        if self._spent:
            raise GraphReuseError("this graph has already been backpropagated")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward()
        self._spent = True

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.grad is not None})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul_const(self, -1.0)

    def __sub__(self, other):
        return add(self, mul_const(as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_const(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose_last2(self):
        return transpose_last2(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and structural primitives
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    """Hadamard product; operands must have identical shapes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(
            f"elementwise product needs equal shapes, got {a.data.shape} vs {b.data.shape}"
        )
    out_data = a.data * b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    out = _make(out_data, (a, b), backward)
    return out


def mul_const(a, c) -> Tensor:
    """Multiply by a constant scalar or array broadcastable to a's shape."""
    a = as_tensor(a)
    c = np.asarray(c, dtype=np.float64)
    out_data = a.data * c
    if out_data.shape != a.data.shape:
        raise ShapeError(
            f"constant of shape {c.shape} does not broadcast onto {a.data.shape}"
        )

    def backward():
        a._accumulate(out.grad * c)

    out = _make(out_data, (a,), backward)
    return out


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul {a.data.shape} @ {b.data.shape}: {e}") from None

    def backward():
        g = out.grad
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def tsum(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.array(a.data.sum())

    def backward():
        a._accumulate(np.full_like(a.data, float(out.grad)))

    out = _make(out_data, (a,), backward)
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward():
        a._accumulate(out.grad.reshape(a.data.shape))

    out = _make(out_data, (a,), backward)
    return out


def transpose_last2(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.swapaxes(a.data, -1, -2)

    def backward():
        a._accumulate(np.swapaxes(out.grad, -1, -2))

    out = _make(out_data, (a,), backward)
    return out


def take(a, key) -> Tensor:
    """Basic or integer-array indexing; backward scatter-adds."""
    a = as_tensor(a)
    out_data = a.data[key]

    def backward():
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, out.grad)
        a._accumulate(buf)

    out = _make(out_data, (a,), backward)
    return out


def gelu(a) -> Tensor:
    """x * Phi(x) with the exact erf-based normal CDF."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data / _SQRT2))
    out_data = a.data * cdf

    def backward():
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        a._accumulate(out.grad * (cdf + a.data * pdf))

    out = _make(out_data, (a,), backward)
    return out


def logcosh(a) -> Tensor:
    """log(cosh(x)) in the overflow-free form |x| + softplus(-2|x|) - log 2."""
    a = as_tensor(a)
    ax = np.abs(a.data)
    out_data = ax + np.log1p(np.exp(-2.0 * ax)) - _LOG2

    def backward():
        a._accumulate(out.grad * np.tanh(a.data))

    out = _make(out_data, (a,), backward)
    return out


def dropout(a, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    a = as_tensor(a)
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    scale = 1.0 / (1.0 - p)
    mask = (rng.random(a.data.shape) >= p) * scale
    out_data = a.data * mask

    def backward():
        a._accumulate(out.grad * mask)

    out = _make(out_data, (a,), backward)
    return out


# --------------------------------------------------------------------------
# conv1d: grouped, dilated cross-correlation over (C, L) feature maps
# --------------------------------------------------------------------------


def _conv_view(xp: np.ndarray, kernel: int, dilation: int, l_out: int) -> np.ndarray:
    # view[c, k, i] = xp[c, i + k*dilation], shape (C, K, L_out)
    sw = np.lib.stride_tricks.sliding_window_view(xp, (kernel - 1) * dilation + 1, axis=1)
    return np.swapaxes(sw[:, :l_out, ::dilation], 1, 2)


def conv1d(x, weight, bias=None, groups: int = 1, dilation: int = 1,
           padding: str = "causal") -> Tensor:
    """Grouped dilated 1-D cross-correlation.

    ``x`` is (C_in, L), ``weight`` (C_out, C_in // groups, K), ``bias``
    (C_out,) or None.  ``padding="causal"`` left-pads with (K-1)*dilation
    zeros so output index i sees inputs <= i and length is preserved;
    ``padding="none"`` is the valid convolution.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if bias is not None:
        bias = as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 3:
        raise ShapeError(
            f"conv1d expects x (C, L) and weight (C_out, C_in/g, K), "
            f"got {x.data.shape} and {weight.data.shape}"
        )
    c_in, length = x.data.shape
    c_out, c_in_g, kernel = weight.data.shape
    if groups < 1 or c_in % groups != 0 or c_out % groups != 0 or c_in_g != c_in // groups:
        raise ShapeError(
            f"conv1d group mismatch: x {x.data.shape}, weight {weight.data.shape}, "
            f"groups={groups}"
        )
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if padding not in ("causal", "none"):
        raise ValueError(f"unknown padding mode {padding!r}")
    if bias is not None and bias.data.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.data.shape} does not match C_out={c_out}")

    pad = (kernel - 1) * dilation if padding == "causal" else 0
    l_out = length + pad - (kernel - 1) * dilation
    if l_out < 1:
        raise ShapeError(
            f"conv1d output empty: input length {length}, kernel {kernel}, "
            f"dilation {dilation}, padding {padding!r}"
        )
    xp = np.pad(x.data, ((0, 0), (pad, 0))) if pad else x.data
    view = _conv_view(xp, kernel, dilation, l_out)  # (C_in, K, L_out)
    vg = view.reshape(groups, c_in_g, kernel, l_out)
    wg = weight.data.reshape(groups, c_out // groups, c_in_g, kernel)
    out_data = np.einsum("gock,gcki->goi", wg, vg).reshape(c_out, l_out)
    if bias is not None:
        out_data = out_data + bias.data[:, None]

    def backward():
        g = out.grad.reshape(groups, c_out // groups, l_out)
        if weight.requires_grad:
            gw = np.einsum("goi,gcki->gock", g, vg).reshape(weight.data.shape)
            weight._accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(out.grad.sum(axis=1))
        if x.requires_grad:
            gv = np.einsum("gock,goi->gcki", wg, g).reshape(c_in, kernel, l_out)
            gxp = np.zeros_like(xp)
            for k in range(kernel):
                gxp[:, k * dilation : k * dilation + l_out] += gv[:, k, :]
            x._accumulate(gxp[:, pad:] if pad else gxp)

    out = _make(out_data, (x, weight) + ((bias,) if bias is not None else ()), backward)
    return out


# --------------------------------------------------------------------------
# batch normalization over the length axis of a (C, L) map
# --------------------------------------------------------------------------


class RunningStats:
    """Per-channel running mean/variance owned by a batchnorm layer."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)

    def update(self, mean: np.ndarray, var: np.ndarray, momentum: float) -> None:
        self.mean = (1.0 - momentum) * self.mean + momentum * mean
        self.var = (1.0 - momentum) * self.var + momentum * var


def batch_norm1d(x, gamma, beta, running: RunningStats, training: bool,
                 momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Normalize each channel over the length axis.

    Training mode uses batch statistics (biased variance) and updates the
    running buffers; eval mode normalizes with the running buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 2:
        raise ShapeError(f"batch_norm1d expects (C, L), got {x.data.shape}")
    c, length = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"gamma/beta shapes {gamma.data.shape}/{beta.data.shape} do not match C={c}"
        )

    if training:
        if length < 2:
            raise ValueError("training-mode batch norm needs at least 2 samples")
        mean = x.data.mean(axis=1)
        var = x.data.var(axis=1)
        running.update(mean, var, momentum)
    else:
        mean = running.mean
        var = running.var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[:, None]) * inv_std[:, None]
    out_data = gamma.data[:, None] * xhat + beta.data[:, None]

    def backward():
        g = out.grad
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=1))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=1))
        if x.requires_grad:
            gxhat = g * gamma.data[:, None]
            if training:
                # d/dx of ((x - mean(x)) / std(x)) with batch statistics
                m1 = gxhat.mean(axis=1, keepdims=True)
                m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
                gx = inv_std[:, None] * (gxhat - m1 - xhat * m2)
            else:
                gx = gxhat * inv_std[:, None]
            x._accumulate(gx)

    out = _make(out_data, (x, gamma, beta), backward)
    return out


# --------------------------------------------------------------------------
# differentiable SO(3) exponential / logarithm for the increment loss
# --------------------------------------------------------------------------


def _hat_np(v: np.ndarray) -> np.ndarray:
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = np.zeros_like(x)
    return np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=-1).reshape(
        v.shape[:-1] + (3, 3)
    )


def _vee_antisym(A: np.ndarray) -> np.ndarray:
    # <A, hat(e_k)> for each axis: pairs the antisymmetric part of A
    return np.stack(
        [A[..., 2, 1] - A[..., 1, 2], A[..., 0, 2] - A[..., 2, 0],
         A[..., 1, 0] - A[..., 0, 1]],
        axis=-1,
    )


def so3_exp(theta) -> Tensor:
    """Taped Rodrigues map, (..., 3) -> (..., 3, 3).

    Backward uses exp(theta + d) ~ exp(theta) exp(J_r(theta) d) with the
    right Jacobian J_r, giving d(theta) = J_r^T vee(R^T G).
    """
    theta = as_tensor(theta)
    if theta.data.shape[-1] != 3:
        raise ShapeError(f"so3_exp expects (..., 3), got {theta.data.shape}")
    W = _hat_np(theta.data)
    W2 = W @ W
    ang = np.linalg.norm(theta.data, axis=-1)
    small = ang < 1e-8
    angs = np.where(small, 1.0, ang)
    a = np.where(small, 1.0 - ang**2 / 6.0, np.sin(angs) / angs)
    b = np.where(small, 0.5 - ang**2 / 24.0, (1.0 - np.cos(angs)) / angs**2)
    out_data = np.eye(3) + a[..., None, None] * W + b[..., None, None] * W2

    def backward():
        G = out.grad
        w = _vee_antisym(np.swapaxes(out_data, -1, -2) @ G)
        # right Jacobian J_r = I - c1 hat + c2 hat^2
        small_j = ang < 1e-4
        angj = np.where(small_j, 1.0, ang)
        c1 = np.where(small_j, 0.5 - ang**2 / 24.0, (1.0 - np.cos(angj)) / angj**2)
        c2 = np.where(small_j, 1.0 / 6.0 - ang**2 / 120.0,
                      (angj - np.sin(angj)) / angj**3)
        Jr = np.eye(3) - c1[..., None, None] * W + c2[..., None, None] * W2
        theta._accumulate(np.einsum("...ji,...j->...i", Jr, w))

    out = _make(out_data, (theta,), backward)
    return out


def so3_log(R) -> Tensor:
    """Taped logarithm map, (..., 3, 3) -> (..., 3), valid for angles < pi.

    The forward uses theta = angle/sin(angle) * vee(R - R^T)/2; the
    backward differentiates that expression entrywise.  Inputs with angle
    within 1e-6 of pi raise, since the formula is singular there (the loss
    only ever sees small residual rotations).
    """
    R = as_tensor(R)
    if R.data.shape[-2:] != (3, 3):
        raise ShapeError(f"so3_log expects (..., 3, 3), got {R.data.shape}")
    v = 0.5 * _vee_antisym(R.data)
    s = np.linalg.norm(v, axis=-1)
    ctr = 0.5 * (np.trace(R.data, axis1=-2, axis2=-1) - 1.0)
    ang = np.arctan2(s, ctr)
    if np.any(ang > np.pi * (1.0 - 1e-6)):
        raise ValueError("so3_log gradient path is singular near pi")
    small = ang < 1e-4
    angs = np.where(small, 1.0, ang)
    ss = np.where(small, 1.0, s)
    c = np.where(small, 1.0 + ang**2 / 6.0 + 7.0 * ang**4 / 360.0, angs / ss)
    out_data = v * c[..., None]

    def backward():
        g = out.grad
        # a = c'(ang) / (2 sin ang) stays finite as ang -> 0 (limit 1/6)
        a = np.where(
            small,
            1.0 / 6.0 + ang**2 / 15.0,
            (np.sin(angs) - angs * np.cos(angs)) / (2.0 * np.sin(angs) ** 3),
        )
        gv = np.einsum("...k,...k->...", g, v)
        gr = (-a * gv)[..., None, None] * np.eye(3) + 0.5 * c[..., None, None] * _hat_np(g)
        R._accumulate(gr)

    out = _make(out_data, (R,), backward)
    return out
