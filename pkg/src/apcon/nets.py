"""Modified MLPs, convolutional branch nets and the DeepONet combiner.

All forward functions are pure functions of a ``{segment name: array}``
mapping (see :meth:`ParamLayout.unflatten`), so the same code runs on numpy
arrays and on traced JAX arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Union

import jax
import jax.numpy as jnp
import numpy as np

from apcon.autodiff import ParamLayout, ParameterVector

LN_EPS = 1e-6


class ShapeError(ValueError):
    pass


def gelu(z):
    return jax.nn.gelu(z, approximate=True)


ACTIVATIONS = {
    "swish": jax.nn.swish,
    "gelu": gelu,
    "tanh": jnp.tanh,
    "softplus": jax.nn.softplus,
    "identity": lambda z: z,
}


def positive_wrap(u):
    """Softplus log(1 + e^u), evaluated as max(u, 0) + log1p(e^-|u|)."""
    return jnp.maximum(u, 0.0) + jnp.log1p(jnp.exp(-jnp.abs(u)))


@dataclass(frozen=True)
class ModifiedMlpConfig:
    input_dim: int
    width: int = 64
    hidden_layers: int = 4
    output_dim: int = 64
    activation: str = "swish"
    layer_norm: bool = False

    def __post_init__(self):
        if self.width <= 0 or self.hidden_layers < 1 or self.input_dim <= 0 or self.output_dim <= 0:
            raise ValueError(f"invalid modified MLP config {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        d, w = self.input_dim, self.width
        out = []
        for enc in ("U", "V", "H"):
            out += [(f"{enc}/W", (d, w)), (f"{enc}/b", (w,))]
        for l in range(1, self.hidden_layers):
            out += [(f"Z{l}/W", (w, w)), (f"Z{l}/b", (w,))]
            if self.layer_norm:
                out += [(f"Z{l}/ln_gain", (w,)), (f"Z{l}/ln_bias", (w,))]
        out += [("out/W", (w, self.output_dim)), ("out/b", (self.output_dim,))]
        return out


@dataclass(frozen=True)
class FilterLayer:
    channels: int = 4
    kernel: tuple[int, int] = (2, 2)
    stride: tuple[int, int] = (2, 2)
    pool: tuple[int, int] = (2, 2)
    pool_stride: tuple[int, int] = (2, 2)
    order: str = "pool_then_act"
    activation: str = "gelu"

    def __post_init__(self):
        if self.order not in ("pool_then_act", "act_then_pool"):
            raise ValueError(f"unknown filter order {self.order!r}")


@dataclass(frozen=True)
class ConvBranchConfig:
    input_shape: tuple[int, int] = (32, 64)
    filter_layers: tuple[FilterLayer, ...] = (FilterLayer(), FilterLayer())
    lift_width: int = 64
    mlp: ModifiedMlpConfig = field(default_factory=lambda: ModifiedMlpConfig(
        input_dim=64, hidden_layers=5, layer_norm=True))

    def __post_init__(self):
        if self.mlp.input_dim != self.lift_width:
            raise ValueError("mlp.input_dim must equal lift_width")
        self.feature_shape()

    def feature_shape(self) -> tuple[int, int]:
        h, w = self.input_shape
        for i, fl in enumerate(self.filter_layers):
            h, w = _valid_out(h, w, fl.kernel, fl.stride, f"filter layer {i} conv")
            h, w = _valid_out(h, w, fl.pool, fl.pool_stride, f"filter layer {i} pool")
        return h, w

    @property
    def output_dim(self) -> int:
        return self.mlp.output_dim

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        cin = 1
        for i, fl in enumerate(self.filter_layers):
            out += [(f"conv{i}/K", (fl.channels, cin) + tuple(fl.kernel)), (f"conv{i}/b", (fl.channels,))]
            cin = fl.channels
        h, w = self.feature_shape()
        out += [("lift/W", (h * w, self.lift_width)), ("lift/b", (self.lift_width,))]
        out += [("mlp/" + n, s) for n, s in self.mlp.shapes()]
        return out


BranchConfig = Union[ModifiedMlpConfig, ConvBranchConfig]


@dataclass(frozen=True)
class DeepOnetConfig:
    branch: BranchConfig
    trunk: ModifiedMlpConfig

    def __post_init__(self):
        if self.branch.output_dim != self.trunk.output_dim:
            raise ShapeError(f"branch width {self.branch.output_dim} != trunk width {self.trunk.output_dim}")

    @property
    def p(self) -> int:
        return self.trunk.output_dim

    @property
    def is_conv(self) -> bool:
        return isinstance(self.branch, ConvBranchConfig)

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return ([("branch/" + n, s) for n, s in self.branch.shapes()]
                + [("trunk/" + n, s) for n, s in self.trunk.shapes()]
                + [("b0", ())])


def _valid_out(h, w, k, s, what):
    kh, kw = k
    sh, sw = s
    if h < kh or w < kw or (h - kh) % sh or (w - kw) % sw:
        raise ShapeError(f"{what}: window {k} with stride {s} does not tile a {h}x{w} input")
    return (h - kh) // sh + 1, (w - kw) // sw + 1


# ---------------------------------------------------------------- primitives

def layer_norm(v, gain, bias, eps: float = LN_EPS):
    """Normalise over the last (feature) axis, then scale and shift."""
    mean = jnp.mean(v, axis=-1, keepdims=True)
    var = jnp.mean((v - mean) ** 2, axis=-1, keepdims=True)
    return (v - mean) / jnp.sqrt(var + eps) * gain + bias


def conv2d(x, kernels, biases, stride):
    """Cross-correlation without padding. ``x``: (C_in, H, W) or (B, C_in, H, W);
    ``kernels``: (C_out, C_in, kh, kw)."""
    x = jnp.asarray(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    _valid_out(x.shape[-2], x.shape[-1], kernels.shape[-2:], stride, "conv2d")
    if x.shape[1] != kernels.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {kernels.shape[1]}")
    y = jax.lax.conv_general_dilated(x, jnp.asarray(kernels), tuple(stride), "VALID",
                                     precision=jax.lax.Precision.HIGHEST)
    y = y + jnp.asarray(biases)[None, :, None, None]
    return y[0] if squeeze else y


def avg_pool2d(x, window, stride):
    """Mean over windows of the last two axes (no padding)."""
    x = jnp.asarray(x)
    _valid_out(x.shape[-2], x.shape[-1], window, stride, "avg_pool2d")
    nd = x.ndim
    dims = (1,) * (nd - 2) + tuple(window)
    strides = (1,) * (nd - 2) + tuple(stride)
    s = jax.lax.reduce_window(x, 0.0, jax.lax.add, dims, strides, "VALID")
    return s / (window[0] * window[1])


# ---------------------------------------------------------------- networks

def _sub(p: Mapping, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in p.items() if k.startswith(prefix)}


def modified_mlp_forward(cfg: ModifiedMlpConfig, p: Mapping, x):
    """U, V, H encoders, gated hidden updates H <- (1 - Z) U + Z V, affine output."""
    if isinstance(p, ParameterVector):
        p = p.arrays()
    if x.shape[-1] != cfg.input_dim:
        raise ShapeError(f"expected input dim {cfg.input_dim}, got {x.shape[-1]}")
    act = ACTIVATIONS[cfg.activation]
    U = act(x @ p["U/W"] + p["U/b"])
    V = act(x @ p["V/W"] + p["V/b"])
    H = act(x @ p["H/W"] + p["H/b"])
    for l in range(1, cfg.hidden_layers):
        pre = H @ p[f"Z{l}/W"] + p[f"Z{l}/b"]
        if cfg.layer_norm:
            pre = layer_norm(pre, p[f"Z{l}/ln_gain"], p[f"Z{l}/ln_bias"])
        Z = act(pre)
        H = (1.0 - Z) * U + Z * V
    return H @ p["out/W"] + p["out/b"]


def conv_features(cfg: ConvBranchConfig, p: Mapping, a):
    """Filter layers then channel sum; returns (..., H_out * W_out)."""
    a = jnp.asarray(a)
    if tuple(a.shape[-2:]) != tuple(cfg.input_shape):
        raise ShapeError(f"expected input of shape {cfg.input_shape}, got {a.shape[-2:]}")
    lead = a.shape[:-2]
    z = a.reshape((-1, 1) + tuple(cfg.input_shape))
    for i, fl in enumerate(cfg.filter_layers):
        act = ACTIVATIONS[fl.activation]
        z = conv2d(z, p[f"conv{i}/K"], p[f"conv{i}/b"], fl.stride)
        if fl.order == "pool_then_act":
            z = act(avg_pool2d(z, fl.pool, fl.pool_stride))
        else:
            z = avg_pool2d(act(z), fl.pool, fl.pool_stride)
    z = jnp.sum(z, axis=1)
    return z.reshape(lead + (-1,))


def conv_branch_forward(cfg: ConvBranchConfig, p: Mapping, a):
    if isinstance(p, ParameterVector):
        p = p.arrays()
    flat = conv_features(cfg, p, a)
    lifted = flat @ p["lift/W"] + p["lift/b"]
    return modified_mlp_forward(cfg.mlp, _sub(p, "mlp/"), lifted)


def branch_forward(cfg: BranchConfig, p: Mapping, a):
    if isinstance(cfg, ConvBranchConfig):
        return conv_branch_forward(cfg, p, a)
    a = jnp.asarray(a)
    return modified_mlp_forward(cfg, p, a.reshape(a.shape[:-2] + (-1,)))


def deeponet_combine(branch_out, trunk_out, b0):
    """sum_j b_j t_j + b0 for every (input function, query point) pair:
    (B, p) x (N, p) -> (B, N)."""
    if branch_out.shape[-1] != trunk_out.shape[-1]:
        raise ShapeError(f"p mismatch: {branch_out.shape[-1]} vs {trunk_out.shape[-1]}")
    return branch_out @ trunk_out.T + b0


def deeponet_eval(cfg: DeepOnetConfig, p: Mapping, a, y):
    """G(a)(y) for a single input function ``a`` and query points ``y`` (N, d)."""
    if isinstance(p, ParameterVector):
        p = p.arrays()
    b = branch_forward(cfg.branch, _sub(p, "branch/"), jnp.asarray(a)[None])
    t = modified_mlp_forward(cfg.trunk, _sub(p, "trunk/"), jnp.atleast_2d(y))
    return deeponet_combine(b, t, p["b0"])[0]


# ---------------------------------------------------------------- parameters

def _glorot(rng: np.random.Generator, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_params(shapes, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-uniform weights and kernels, zero biases, unit layer-norm gains."""
    out = {}
    for name, shape in shapes:
        leaf = name.rsplit("/", 1)[-1]
        if leaf == "ln_gain":
            out[name] = np.ones(shape)
        elif leaf in ("b", "ln_bias", "b0"):
            out[name] = np.zeros(shape)
        elif leaf == "K":
            receptive = shape[2] * shape[3]
            out[name] = _glorot(rng, shape, shape[1] * receptive, shape[0] * receptive)
        elif leaf == "W":
            out[name] = _glorot(rng, shape, shape[0], shape[1])
        else:
            raise ValueError(f"no initialiser for {name}")
    return out


def init_network(cfg, rng: np.random.Generator, prefix: str = "") -> ParameterVector:
    shapes = [(prefix + n, s) for n, s in cfg.shapes()]
    return ParameterVector.from_arrays(init_params(shapes, rng))


def param_count(obj) -> int:
    """Scalar parameter count of a config, a ParameterVector or a layout."""
    if isinstance(obj, ParameterVector):
        return len(obj)
    if isinstance(obj, ParamLayout):
        return obj.size
    return sum(int(np.prod(s, dtype=int)) for _, s in obj.shapes())


def layout_of(cfg, prefix: str = "") -> ParamLayout:
    return ParamLayout.from_shapes([(prefix + n, s) for n, s in cfg.shapes()])


def paper_trunk(input_dim: int, layer_norm: bool, width: int = 64, p: int = 64) -> ModifiedMlpConfig:
    return ModifiedMlpConfig(input_dim=input_dim, width=width, hidden_layers=4, output_dim=p,
                             activation="swish", layer_norm=layer_norm)


def paper_conv_branch(input_shape=(32, 64), *, channels: int = 4, kernel=(2, 2), n_filter_layers: int = 2,
                      order: str = "pool_then_act", layer_norm: bool = True, width: int = 64,
                      p: int = 64) -> ConvBranchConfig:
    kernel = tuple(kernel)
    fl = FilterLayer(channels=channels, kernel=kernel, stride=kernel, pool=(2, 2), pool_stride=(2, 2),
                     order=order, activation="gelu")
    mlp = ModifiedMlpConfig(input_dim=width, width=width, hidden_layers=5, output_dim=p,
                            activation="swish", layer_norm=layer_norm)
    return ConvBranchConfig(input_shape=tuple(input_shape), filter_layers=(fl,) * n_filter_layers,
                            lift_width=width, mlp=mlp)


def paper_dense_branch(input_shape=(32, 64), *, layer_norm: bool = False, width: int = 64,
                       p: int = 64) -> ModifiedMlpConfig:
    return ModifiedMlpConfig(input_dim=input_shape[0] * input_shape[1], width=width, hidden_layers=5,
                             output_dim=p, activation="swish", layer_norm=layer_norm)
