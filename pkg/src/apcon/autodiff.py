"""Exact input partials and parameter gradients on top of JAX.

Input partials use forward mode (``jax.jvp``); parameter gradients use
reverse mode (``jax.value_and_grad``). The two compose, so a loss built from
input partials of a network can be differentiated w.r.t. the parameters.
Finite differences appear only in :func:`fd_check`, the validation oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from apcon.container import read_container, write_container


class UnsupportedOperationError(TypeError):
    """A function handed to the engine used an operation it cannot trace."""


class NumericError(FloatingPointError):
    def __init__(self, message: str, segment: str | None = None):
        super().__init__(message)
        self.segment = segment


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def length(self) -> int:
        return int(np.prod(self.shape, dtype=int))


@dataclass(frozen=True)
class ParamLayout:
    """Ordered named slices of a flat parameter vector. Hashable, so it can be
    a static argument of jitted functions."""

    segments: tuple[Segment, ...]

    def __post_init__(self):
        names = [s.name for s in self.segments]
        if len(set(names)) != len(names):
            raise ValueError("segment names must be unique")
        pos = 0
        for s in self.segments:
            if s.offset != pos:
                raise ValueError(f"segment {s.name!r} is not contiguous")
            pos += s.length

    @classmethod
    def from_shapes(cls, shapes: Sequence[tuple[str, tuple[int, ...]]]) -> "ParamLayout":
        segs, pos = [], 0
        for name, shape in shapes:
            seg = Segment(name, pos, tuple(int(d) for d in shape))
            segs.append(seg)
            pos += seg.length
        return cls(tuple(segs))

    @property
    def size(self) -> int:
        return sum(s.length for s in self.segments)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def segment(self, name: str) -> Segment:
        for s in self.segments:
            if s.name == name:
                return s
        raise KeyError(name)

    def unflatten(self, flat) -> dict:
        """Named views of ``flat`` (numpy or traced JAX array)."""
        return {s.name: flat[s.offset:s.offset + s.length].reshape(s.shape) for s in self.segments}

    def segment_of(self, index: int) -> str:
        for s in self.segments:
            if s.offset <= index < s.offset + s.length:
                return s.name
        raise IndexError(index)

    def prefixed(self, prefix: str) -> "ParamLayout":
        return ParamLayout.from_shapes([(prefix + s.name, s.shape) for s in self.segments])


@dataclass
class ParameterVector:
    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.size,):
            raise ValueError(f"expected {self.layout.size} values, got shape {self.values.shape}")

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParameterVector":
        layout = ParamLayout.from_shapes([(k, np.shape(v)) for k, v in arrays.items()])
        flat = np.concatenate([np.ravel(np.asarray(v, dtype=np.float64)) for v in arrays.values()]) \
            if arrays else np.zeros(0)
        return cls(flat, layout)

    def __len__(self) -> int:
        return self.values.size

    def __getitem__(self, name: str) -> np.ndarray:
        s = self.layout.segment(name)
        return self.values[s.offset:s.offset + s.length].reshape(s.shape)

    def arrays(self) -> dict[str, np.ndarray]:
        return self.layout.unflatten(self.values)

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(np.asarray(values, dtype=np.float64), self.layout)

    def save(self, path, meta: dict | None = None) -> None:
        write_container(path, self.arrays(), meta=meta, kind="parameters")

    @classmethod
    def load(cls, path) -> tuple["ParameterVector", dict]:
        arrays, meta, kind = read_container(path)
        if kind != "parameters":
            raise ValueError(f"{path} holds {kind!r}, not parameters")
        return cls.from_arrays(arrays), meta


@dataclass(frozen=True)
class InputPoint:
    coords: tuple[float, ...]
    wrt: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        bad = [i for i in self.wrt if not 0 <= i < len(self.coords)]
        if bad:
            raise ValueError(f"wrt indices {bad} outside 0..{len(self.coords) - 1}")


@dataclass
class GradientRecord:
    value: float
    input_partials: dict[int, float]
    param_gradient: np.ndarray | None = None


_TRACE_ERRORS = (jax.errors.TracerArrayConversionError, jax.errors.ConcretizationTypeError,
                 jax.errors.TracerBoolConversionError, jax.errors.TracerIntegerConversionError)


def _traced(fn, *args):
    try:
        return fn(*args)
    except _TRACE_ERRORS as exc:
        raise UnsupportedOperationError(f"operation cannot be differentiated by the engine: {exc}") from exc


def eval_with_input_partials(net_forward: Callable, params: ParameterVector, point: InputPoint) -> GradientRecord:
    """Value of ``net_forward(flat_params, coords)`` and its exact partials
    with respect to each coordinate index in ``point.wrt``."""
    theta = jnp.asarray(params.values)
    x = jnp.asarray(point.coords, dtype=jnp.float64)

    def f(c):
        return jnp.reshape(net_forward(theta, c), ())

    value = _traced(f, x)
    partials = {}
    for i in sorted(point.wrt):
        tangent = jnp.zeros_like(x).at[i].set(1.0)
        _, d = _traced(lambda: jax.jvp(f, (x,), (tangent,)))
        partials[i] = float(d)
    return GradientRecord(float(value), partials)


def input_partials(fn: Callable, args: Sequence, wrt: Sequence[int]):
    """Batched partials of a pointwise function.

    ``fn(*args)`` must act elementwise over the leading point axis of every
    argument (output column i depends only on input i). Then the JVP with a
    unit tangent on argument k yields d out_i / d args[k]_i for all points at
    once. Returns ``(value, [partial_k for k in wrt])``.
    """
    args = tuple(jnp.asarray(a) for a in args)
    wrt = tuple(wrt)
    if not wrt:
        return fn(*args), []
    # one primal pass, all tangent directions pushed as a batch
    value, lin = jax.linearize(fn, *args)
    select = jnp.eye(len(args))[jnp.array(wrt)]

    def push(row):
        return lin(*(row[i] * jnp.ones_like(a) for i, a in enumerate(args)))

    d = jax.vmap(push)(select)
    return value, [d[i] for i in range(len(wrt))]


def concat_partials(fn: Callable, groups: Sequence[Sequence], wrt: Sequence[int]):
    """:func:`input_partials` on several point sets at once.

    Each group is a tuple of coordinate arrays; the groups are concatenated
    along the point axis, evaluated in a single call, and split again.
    Returns a list with one ``(value, partials)`` pair per group.
    """
    sizes = [jnp.shape(g[0])[0] for g in groups]
    args = [jnp.concatenate([jnp.asarray(g[i]) for g in groups]) for i in range(len(groups[0]))]
    value, parts = input_partials(fn, args, wrt)
    cuts = np.cumsum(sizes)[:-1].tolist()

    def split(a):
        a = jnp.broadcast_to(a, jnp.shape(a)[:-1] + (sum(sizes),)) if jnp.ndim(a) else jnp.broadcast_to(a, (sum(sizes),))
        return jnp.split(a, cuts, axis=-1)

    vals = split(value)
    ders = [split(p) for p in parts]
    return [(vals[i], [d[i] for d in ders]) for i in range(len(groups))]


def _raise_nonfinite(layout: ParamLayout, values, loss, grad):
    for s in layout.segments:
        sl = slice(s.offset, s.offset + s.length)
        if not np.all(np.isfinite(values[sl])) or not np.all(np.isfinite(grad[sl])):
            raise NumericError(f"non-finite loss {loss}; offending segment {s.name!r}", s.name)
    raise NumericError(f"non-finite loss {loss}", None)


def grad_loss(loss_fn: Callable, params: ParameterVector, *, jit: bool = False) -> tuple[float, np.ndarray]:
    """Loss value and d loss / d theta for a scalar ``loss_fn(flat_params)``."""
    vg = jax.value_and_grad(loss_fn)
    if jit:
        vg = jax.jit(vg)
    loss, grad = _traced(vg, jnp.asarray(params.values))
    loss = float(loss)
    grad = np.asarray(grad)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        _raise_nonfinite(params.layout, params.values, loss, grad)
    return loss, grad


def relative_error(a, b, floor: float = 1e-12) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_difference(f: Callable, x, h: float, indices: Sequence[int] | None = None) -> np.ndarray:
    x = np.array(x, dtype=np.float64, ndmin=1)
    idx = range(x.size) if indices is None else indices
    out = []
    for i in idx:
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out.append((float(f(xp)) - float(f(xm))) / (2 * h))
    return np.array(out)


def fd_check(f: Callable, x, h: float = 1e-4, indices: Sequence[int] | None = None) -> float:
    """Max relative error between the engine gradient of scalar ``f`` and
    central differences, over ``indices`` (all coordinates by default).

    Nondifferentiable points are not special-cased: the mismatch is reported.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64, ndmin=1)

    def fs(z):
        return jnp.reshape(f(z), ())

    engine = np.asarray(_traced(jax.grad(fs), jnp.asarray(x)))
    idx = list(range(x.size)) if indices is None else list(indices)
    fd = central_difference(lambda z: fs(jnp.asarray(z)), x, h, idx)
    return float(np.max(relative_error(engine[idx], fd)))
