"""The calibration network: four depthwise-separable convolution layers, a
large-kernel-attention block, and a pointwise output head, together with
the trainable 3x3 calibration matrix applied as
``omega_tilde = C @ omega_hat + delta``.

Every convolution is causally left-padded, so the correction at index t
depends only on inputs at indices <= t.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import tape
from .errors import ConfigError
from .tape import RunningStats, Tensor


@dataclass
class ModelConfig:
    window: int = 16000
    in_channels: int = 6
    out_channels: int = 3
    dsc_channels: tuple[int, ...] = (16, 32, 64, 128)
    dsc_kernels: tuple[int, ...] = (7, 7, 7, 7)
    dsc_dilations: tuple[int, ...] = (1, 4, 16, 64)
    lka_kernel: int = 5
    lka_dilated_kernel: int = 7
    lka_dilation: int = 3
    lka_enabled: bool = True
    dropout: float = 0.1

    def __post_init__(self):
        self.dsc_channels = tuple(int(c) for c in self.dsc_channels)
        self.dsc_kernels = tuple(int(k) for k in self.dsc_kernels)
        self.dsc_dilations = tuple(int(d) for d in self.dsc_dilations)
        if not (len(self.dsc_channels) == len(self.dsc_kernels) == len(self.dsc_dilations) == 4):
            raise ConfigError("exactly 4 separable-convolution layers are required")
        for k in self.dsc_kernels + (self.lka_kernel, self.lka_dilated_kernel):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel lengths must be odd and positive, got {k}")
        for d in self.dsc_dilations + (self.lka_dilation,):
            if d < 1:
                raise ConfigError(f"dilations must be >= 1, got {d}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.receptive_field > self.window:
            raise ConfigError(
                f"receptive field {self.receptive_field} exceeds window {self.window}"
            )

    @property
    def receptive_field(self) -> int:
        rf = 1 + sum((k - 1) * d for k, d in zip(self.dsc_kernels, self.dsc_dilations))
        if self.lka_enabled:
            rf += (self.lka_kernel - 1) + (self.lka_dilated_kernel - 1) * self.lka_dilation
        return rf


# keys accepted in a `key = value` model-config file
_TUPLE_KEYS = {"dsc_channels", "dsc_kernels", "dsc_dilations"}
_INT_KEYS = {"window", "in_channels", "out_channels", "lka_kernel",
             "lka_dilated_kernel", "lka_dilation"}
_FLOAT_KEYS = {"dropout"}
_BOOL_KEYS = {"lka_enabled"}
MODEL_CONFIG_KEYS = _TUPLE_KEYS | _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS


def parse_kv_file(path) -> dict[str, str]:
    """Parse a `key = value` text file. '#' starts a comment."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _parse_bool(key: str, value: str) -> bool:
    low = value.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def model_config_from_dict(raw: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for key, value in raw.items():
        if key not in MODEL_CONFIG_KEYS:
            continue
        try:
            if key in _TUPLE_KEYS:
                kwargs[key] = tuple(int(v) for v in value.split(","))
            elif key in _INT_KEYS:
                kwargs[key] = int(value)
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(value)
            else:
                kwargs[key] = _parse_bool(key, value)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    return ModelConfig(**kwargs)


def load_model_config(path) -> ModelConfig:
    return model_config_from_dict(parse_kv_file(path))


# --------------------------------------------------------------------------
# parameter counting (trainable scalars only; running stats excluded)
# --------------------------------------------------------------------------


def conv_param_count(c_in: int, c_out: int, kernel: int, groups: int = 1) -> int:
    return c_out * (c_in // groups) * kernel + c_out


def param_count(config: ModelConfig) -> int:
    total = 9  # calibration matrix
    c_prev = config.in_channels
    for c, k in zip(config.dsc_channels, config.dsc_kernels):
        total += conv_param_count(c_prev, c_prev, k, groups=c_prev)  # depthwise
        total += 2 * c_prev                                          # batchnorm affine
        total += conv_param_count(c_prev, c, 1)                      # pointwise
        c_prev = c
    if config.lka_enabled:
        total += lka_param_count(c_prev, config.lka_kernel, config.lka_dilated_kernel)
    total += conv_param_count(c_prev, config.out_channels, 1)
    return total


def lka_param_count(channels: int, kernel: int, dilated_kernel: int) -> int:
    return (conv_param_count(channels, channels, kernel, groups=channels)
            + conv_param_count(channels, channels, dilated_kernel, groups=channels)
            + conv_param_count(channels, channels, 1))


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


def dsc_layer(x, w_dw: Tensor, b_dw: Tensor, gamma: Tensor, beta: Tensor,
              running: RunningStats, w_pw: Tensor, b_pw: Tensor, dilation: int,
              training: bool, p: float, rng=None) -> Tensor:
    """Depthwise conv -> batchnorm -> GELU -> pointwise conv -> dropout."""
    c = w_dw.shape[0]
    h = tape.conv1d(x, w_dw, b_dw, groups=c, dilation=dilation, padding="causal")
    h = tape.batch_norm1d(h, gamma, beta, running, training)
    h = tape.gelu(h)
    h = tape.conv1d(h, w_pw, b_pw)
    return tape.dropout(h, p, training, rng)


def lka_block(f, w_dw: Tensor, b_dw: Tensor, w_dwd: Tensor, b_dwd: Tensor,
              w_pw: Tensor, b_pw: Tensor, dilation: int) -> Tensor:
    """Attention map from depthwise, dilated-depthwise, and pointwise convs,
    applied by elementwise product with the input features."""
    c = w_dw.shape[0]
    att = tape.conv1d(f, w_dw, b_dw, groups=c, padding="causal")
    att = tape.conv1d(att, w_dwd, b_dwd, groups=c, dilation=dilation, padding="causal")
    att = tape.conv1d(att, w_pw, b_pw)
    return tape.mul(att, f)


def calibrate(raw_gyro, delta, c_omega) -> Tensor:
    """Apply the calibration equation per sample: C @ omega_hat + delta."""
    return tape.matmul(c_omega, tape.as_tensor(raw_gyro)) + delta


class CalibNet:
    """Network parameters plus the forward pass.

    Parameters live in an insertion-ordered name -> Tensor dict so that
    optimizers, checkpoints and gradient checks all agree on ordering.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.running: dict[str, RunningStats] = {}
        rng = np.random.default_rng(seed)

        c_prev = config.in_channels
        for i, (c, k) in enumerate(zip(config.dsc_channels, config.dsc_kernels)):
            self._add_conv(f"dsc{i}.dw", rng, c_prev, c_prev, k, groups=c_prev)
            self.params[f"dsc{i}.bn.gamma"] = Tensor(np.ones(c_prev), requires_grad=True)
            self.params[f"dsc{i}.bn.beta"] = Tensor(np.zeros(c_prev), requires_grad=True)
            self.running[f"dsc{i}.bn"] = RunningStats(c_prev)
            self._add_conv(f"dsc{i}.pw", rng, c_prev, c, 1)
            c_prev = c
        if config.lka_enabled:
            self._add_conv("lka.dw", rng, c_prev, c_prev, config.lka_kernel, groups=c_prev)
            self._add_conv("lka.dwd", rng, c_prev, c_prev, config.lka_dilated_kernel,
                           groups=c_prev)
            self._add_conv("lka.pw", rng, c_prev, c_prev, 1)
        self._add_conv("out", rng, c_prev, config.out_channels, 1)
        self.params["c_omega"] = Tensor(np.eye(3), requires_grad=True)

    def _add_conv(self, name: str, rng, c_in: int, c_out: int, kernel: int,
                  groups: int = 1) -> None:
        bound = 1.0 / np.sqrt((c_in // groups) * kernel)
        w = rng.uniform(-bound, bound, (c_out, c_in // groups, kernel))
        self.params[f"{name}.w"] = Tensor(w, requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True)

    @property
    def c_omega(self) -> Tensor:
        return self.params["c_omega"]

    def forward(self, x, training: bool = False, rng=None) -> Tensor:
        """Map a normalized (6, N) window to the (3, N) gyro correction."""
        x = tape.as_tensor(x)
        if x.data.ndim != 2 or x.data.shape[0] != self.config.in_channels:
            raise tape.ShapeError(
                f"expected ({self.config.in_channels}, N) input, got {x.data.shape}"
            )
        if x.data.shape[1] < self.config.receptive_field:
            warnings.warn(
                f"window of {x.data.shape[1]} samples is shorter than the "
                f"receptive field ({self.config.receptive_field}); causal "
                f"padding covers the difference",
                stacklevel=2,
            )
        p = self.params
        h = x
        for i, dil in enumerate(self.config.dsc_dilations):
            h = dsc_layer(
                h, p[f"dsc{i}.dw.w"], p[f"dsc{i}.dw.b"],
                p[f"dsc{i}.bn.gamma"], p[f"dsc{i}.bn.beta"], self.running[f"dsc{i}.bn"],
                p[f"dsc{i}.pw.w"], p[f"dsc{i}.pw.b"],
                dilation=dil, training=training, p=self.config.dropout, rng=rng,
            )
        if self.config.lka_enabled:
            h = lka_block(
                h, p["lka.dw.w"], p["lka.dw.b"], p["lka.dwd.w"], p["lka.dwd.b"],
                p["lka.pw.w"], p["lka.pw.b"], self.config.lka_dilation,
            )
        return tape.conv1d(h, p["out.w"], p["out.b"])

    def layer_outputs(self, x) -> dict[str, np.ndarray]:
        """Eval-mode activations per stage, for diagnostics and tests."""
        x = tape.as_tensor(np.asarray(x, dtype=np.float64))
        outs: dict[str, np.ndarray] = {}
        p = self.params
        h = x
        with tape.no_grad():
            for i, dil in enumerate(self.config.dsc_dilations):
                h = dsc_layer(
                    h, p[f"dsc{i}.dw.w"], p[f"dsc{i}.dw.b"],
                    p[f"dsc{i}.bn.gamma"], p[f"dsc{i}.bn.beta"],
                    self.running[f"dsc{i}.bn"],
                    p[f"dsc{i}.pw.w"], p[f"dsc{i}.pw.b"],
                    dilation=dil, training=False, p=self.config.dropout,
                )
                outs[f"dsc{i}"] = h.data.copy()
            if self.config.lka_enabled:
                h = lka_block(
                    h, p["lka.dw.w"], p["lka.dw.b"], p["lka.dwd.w"], p["lka.dwd.b"],
                    p["lka.pw.w"], p["lka.pw.b"], self.config.lka_dilation,
                )
                outs["lka"] = h.data.copy()
            outs["delta"] = tape.conv1d(h, p["out.w"], p["out.b"]).data.copy()
        return outs

    # -- state ---------------------------------------------------------------

    def n_trainable(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Trainable parameters plus batchnorm running stats."""
        out = {name: p.data.copy() for name, p in self.params.items()}
        for name, rs in self.running.items():
            out[f"{name}.running_mean"] = rs.mean.copy()
            out[f"{name}.running_var"] = rs.var.copy()
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise ConfigError(
                f"checkpoint does not match the model config "
                f"(missing: {missing or 'none'}, unexpected: {extra or 'none'})"
            )
        for name, arr in arrays.items():
            if arr.shape != expected[name].shape:
                raise ConfigError(
                    f"checkpoint entry {name} has shape {arr.shape}, "
                    f"config expects {expected[name].shape}"
                )
        for name, p in self.params.items():
            p.data = arrays[name].copy()
        for name, rs in self.running.items():
            rs.mean = arrays[f"{name}.running_mean"].copy()
            rs.var = arrays[f"{name}.running_var"].copy()

    def zero_weights(self) -> None:
        """Zero every conv weight/bias and BN beta; keeps C at identity.

        The correction head then outputs exactly zero, which is the
        degenerate baseline used by several tests.
        """
        for name, p in self.params.items():
            if name == "c_omega" or name.endswith("bn.gamma"):
                continue
            p.data = np.zeros_like(p.data)


def build_net(config: ModelConfig, seed: int = 0, dropout: float | None = None) -> CalibNet:
    if dropout is not None:
        config = replace(config, dropout=dropout)
    return CalibNet(config, seed=seed)
