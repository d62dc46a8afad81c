"""Physical unknowns, PDE residuals and empirical risks.

Residuals are written against *field callables*: functions of coordinate
arrays ``(t, x)`` or ``(t, x, v)`` of shape (N,) returning values of shape
(B, N) (or anything broadcastable to it), one row per input function. A
trained :class:`OperatorModel` produces such callables through
:meth:`OperatorModel.fields`; tests plug in closed-form mocks instead.

Model kinds:

* ``pidon``: f = softplus(G(t, x, v)).
* ``v1`` (micro-macro): rho = G_rho(t, x), g = G_g - <G_g>, f = rho + eps g.
* ``v2`` (even-odd): rho = G_rho(t, x), r = (G_r(v) + G_r(-v)) / 2,
  j = G_j(v) - G_j(-v), f = r + eps j.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import jax
import jax.numpy as jnp
import numpy as np

from apcon.autodiff import ParamLayout, ParameterVector, concat_partials, input_partials
from apcon.nets import (DeepOnetConfig, _sub, branch_forward, deeponet_combine, init_params,
                        modified_mlp_forward, paper_conv_branch, paper_dense_branch, paper_trunk,
                        positive_wrap)
from apcon.quadrature import VelocityQuadrature, gauss_legendre

KINDS = ("pidon", "v1", "v2")
NET_NAMES = {"pidon": ("f",), "v1": ("rho", "g"), "v2": ("rho", "r", "j")}
TERM_NAMES = {
    "pidon": ("interior", "boundary", "initial"),
    "v1": ("macro", "micro", "boundary", "initial"),
    "v2": ("even", "odd", "macro", "constraint", "boundary", "initial"),
}


class ModelKindError(ValueError):
    pass


# ---------------------------------------------------------------- problem

@dataclass(frozen=True)
class Inflow:
    """f(t, x_L, v) = left_value for v > 0 and f(t, x_R, v) = right_value for v < 0."""
    left_value: float = 1.0
    right_value: float = 0.5


@dataclass(frozen=True)
class Dirichlet:
    """f = value at both ends for every velocity."""
    value: float = 0.0


Boundary = Union[Inflow, Dirichlet]


@dataclass(frozen=True)
class ProblemSpec:
    eps: float
    t_max: float
    x_range: tuple[float, float] = (0.0, 1.0)
    boundary: Boundary = field(default_factory=Inflow)
    source: Optional[Callable] = None
    problem_id: str = ""

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")
        if not self.x_range[0] < self.x_range[1]:
            raise ValueError("need x_L < x_R")

    def q(self, t, x):
        if self.source is None:
            return jnp.zeros(jnp.shape(t))
        return self.source(t, x)


def problem_one(eps: float, t_max: float | None = None) -> ProblemSpec:
    """Inflow problem on [0, 1]; horizon 0.5 in the kinetic regime, 0.1 otherwise."""
    if t_max is None:
        t_max = 0.5 if eps > 1e-2 else 0.1
    return ProblemSpec(eps=eps, t_max=t_max, boundary=Inflow(1.0, 0.5), problem_id="I")


def problem_two(eps: float = 1e-4, t_max: float = 0.1) -> ProblemSpec:
    return ProblemSpec(eps=eps, t_max=t_max, boundary=Dirichlet(0.0), problem_id="II")


def make_problem(problem_id: str, eps: float, t_max: float | None = None) -> ProblemSpec:
    if problem_id == "I":
        return problem_one(eps, t_max)
    if problem_id == "II":
        return problem_two(eps, 0.1 if t_max is None else t_max)
    raise ValueError(f"unknown problem {problem_id!r}")


# ---------------------------------------------------------------- collocation

@dataclass
class CollocationBatch:
    """Interior (t, x, v), boundary (t, x_side, v, prescribed value) and the
    initial grid on which the input functions are sampled."""
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    bt: np.ndarray
    bx: np.ndarray
    bv: np.ndarray
    bval: np.ndarray
    x_grid: np.ndarray
    v_grid: np.ndarray

    def arrays(self) -> tuple:
        return (self.t, self.x, self.v, self.bt, self.bx, self.bv, self.bval)


def sample_collocation(problem: ProblemSpec, n_int: int, n_bdy: int, rng: np.random.Generator,
                       x_grid, v_grid) -> CollocationBatch:
    """Uniform interior points and boundary points split evenly between the
    two ends. Inflow: v in (0, 1] at x_L and [-1, 0) at x_R."""
    xl, xr = problem.x_range

    def open_uniform(lo, hi, n):
        # rng.uniform is [lo, hi); reject the endpoint so points are interior
        u = rng.uniform(lo, hi, n)
        bad = u <= lo
        while bad.any():
            u[bad] = rng.uniform(lo, hi, bad.sum())
            bad = u <= lo
        return u

    t = open_uniform(0.0, problem.t_max, n_int)
    x = open_uniform(xl, xr, n_int)
    v = open_uniform(-1.0, 1.0, n_int)
    n_left = n_bdy // 2
    n_right = n_bdy - n_left
    bt = rng.uniform(0.0, problem.t_max, n_bdy)
    bx = np.concatenate([np.full(n_left, xl), np.full(n_right, xr)])
    bc = problem.boundary
    if isinstance(bc, Inflow):
        # 1 - U is in (0, 1], U - 1 is in [-1, 0)
        bv = np.concatenate([1.0 - rng.uniform(0.0, 1.0, n_left), rng.uniform(0.0, 1.0, n_right) - 1.0])
        bval = np.concatenate([np.full(n_left, bc.left_value), np.full(n_right, bc.right_value)])
    else:
        bv = rng.uniform(-1.0, 1.0, n_bdy)
        bval = np.full(n_bdy, bc.value)
    return CollocationBatch(t, x, v, bt, bx, bv, bval, np.asarray(x_grid, float), np.asarray(v_grid, float))


# ---------------------------------------------------------------- residual kernels

def _qarrays(q: VelocityQuadrature):
    return jnp.asarray(q.nodes), jnp.asarray(q.weights), q.mirror


def _avg(vals, w):
    # nodes come in mirrored pairs; summing each pair first makes odd averages exactly zero
    return 0.5 * (vals + vals[..., ::-1]) @ w


def _node_grid(t, x, nodes):
    k = nodes.shape[0]
    return jnp.repeat(t, k), jnp.repeat(x, k), jnp.tile(nodes, t.shape[0])


def _per_node(vals, n, k):
    vals = jnp.asarray(vals)
    return vals.reshape(vals.shape[:-1] + (n, k))


def pidon_interior(f: Callable, t, x, v, eps: float, q: VelocityQuadrature, source=None):
    """eps^2 f_t + eps v f_x - (<f> - f) - eps^2 Q."""
    nodes, w, _ = _qarrays(q)
    n, k = t.shape[0], q.n
    fn = _per_node(f(*_node_grid(t, x, nodes)), n, k)
    fp, (ft, fx) = input_partials(f, (t, x, v), (0, 1))
    qv = 0.0 if source is None else source(t, x)
    return eps**2 * ft + eps * v * fx - (_avg(fn, w) - fp) - eps**2 * qv


def v1_interior(rho: Callable, G: Callable, t, x, v, eps: float, q: VelocityQuadrature, source=None):
    """Macro and micro residuals of the micro-macro system with g = G - <G>."""
    nodes, w, _ = _qarrays(q)
    n, k = t.shape[0], q.n
    (Gn, (Gn_t, Gn_x)), (Gp, (Gp_t, Gp_x)) = concat_partials(G, [_node_grid(t, x, nodes), (t, x, v)], (0, 1))
    Gn, Gn_t, Gn_x = (_per_node(a, n, k) for a in (Gn, Gn_t, Gn_x))
    r, (r_t, r_x) = input_partials(rho, (t, x), (0, 1))
    mG, mGt, mGx = _avg(Gn, w), _avg(Gn_t, w), _avg(Gn_x, w)
    g = Gp - mG
    g_t = Gp_t - mGt
    g_x = Gp_x - mGx
    g_nodes = Gn - mG[..., None]
    mvgx = _avg(nodes * (Gn_x - mGx[..., None]), w)
    Lg = _avg(g_nodes, w) - g
    qv = 0.0 if source is None else source(t, x)
    # Q does not depend on v, so (I - Pi)(eps Q) vanishes; kept for the record
    proj_src = eps * qv - eps * qv
    macro = r_t + mvgx - qv
    micro = eps**2 * g_t + eps * (v * g_x - mvgx) + v * r_x - Lg - proj_src
    return macro, micro


def v2_interior(rho: Callable, Gr: Callable, Gj: Callable, t, x, v, eps: float, q: VelocityQuadrature,
                source=None):
    """Even, odd, macro and constraint residuals of the even-odd system."""
    nodes, w, mirror = _qarrays(q)
    n, k = t.shape[0], q.n
    node_pts = _node_grid(t, x, nodes)
    Grn = _per_node(Gr(*node_pts), n, k)
    r_nodes = 0.5 * (Grn + Grn[..., mirror])
    (a, (a_t, a_x)), (b, (b_t, b_x)) = concat_partials(Gr, [(t, x, v), (t, x, -v)], (0, 1))
    r, r_t, r_x = 0.5 * (a + b), 0.5 * (a_t + b_t), 0.5 * (a_x + b_x)
    (_, (_, Gjn_x)), (c, (c_t, c_x)), (d, (d_t, d_x)) = concat_partials(
        Gj, [node_pts, (t, x, v), (t, x, -v)], (0, 1))
    Gjn_x = _per_node(Gjn_x, n, k)
    jx_nodes = Gjn_x - Gjn_x[..., mirror]
    j, j_t, j_x = c - d, c_t - d_t, c_x - d_x
    p, (p_t,) = input_partials(rho, (t, x), (0,))
    qv = 0.0 if source is None else source(t, x)
    even = eps**2 * r_t + eps**2 * v * j_x - (p - r) - eps**2 * qv
    odd = eps**2 * j_t + v * r_x + j
    macro = p_t + _avg(nodes * jx_nodes, w) - qv
    constraint = p - _avg(r_nodes, w)
    return even, odd, macro, constraint


def _concat_values(fn, groups):
    return [val for val, _ in concat_partials(fn, groups, ())]


def reconstruct_f(kind: str, fields: dict, t, x, v, eps: float, q: VelocityQuadrature):
    """f at scattered points (t, x, v) from the model's fields."""
    if kind == "pidon":
        return fields["f"](t, x, v)
    if kind == "v1":
        nodes, w, _ = _qarrays(q)
        Gn, Gp = _concat_values(fields["g"], [_node_grid(t, x, nodes), (t, x, v)])
        mG = _avg(_per_node(Gn, t.shape[0], q.n), w)
        return fields["rho"](t, x) + eps * (Gp - mG)
    if kind == "v2":
        ra, rb = _concat_values(fields["r"], [(t, x, v), (t, x, -v)])
        ja, jb = _concat_values(fields["j"], [(t, x, v), (t, x, -v)])
        return 0.5 * (ra + rb) + eps * (ja - jb)
    raise ModelKindError(kind)


def reconstruct_f_grid(kind: str, fields: dict, t0: float, x_grid, v_grid, eps: float, q: VelocityQuadrature):
    """f(t0, x_i, v_j) on a tensor grid, shape (B, H, W). For v1 the
    velocity average is taken once per x_i instead of once per point."""
    x_grid = jnp.asarray(x_grid)
    v_grid = jnp.asarray(v_grid)
    h, wdt = x_grid.shape[0], v_grid.shape[0]
    xx = jnp.repeat(x_grid, wdt)
    vv = jnp.tile(v_grid, h)
    tt = jnp.full(xx.shape, t0)
    if kind == "v1":
        nodes, w, _ = _qarrays(q)
        th = jnp.full((h,), t0)
        Gn, G = _concat_values(fields["g"], [_node_grid(th, x_grid, nodes), (tt, xx, vv)])
        mG = _avg(_per_node(Gn, h, q.n), w)
        rho = jnp.asarray(fields["rho"](th, x_grid))
        return rho[..., None] + eps * (_per_node(G, h, wdt) - mG[..., None])
    f = reconstruct_f(kind, fields, tt, xx, vv, eps, q)
    return _per_node(f, h, wdt)


# ---------------------------------------------------------------- model

@dataclass(frozen=True)
class NetSpec:
    """How each DeepONet of a model is built. ``branch`` is ``dense`` (DON) or ``conv`` (CON)."""
    branch: str = "conv"
    layer_norm: bool = True
    width: int = 64
    p: int = 64
    channels: int = 4
    kernel: tuple[int, int] = (2, 2)
    filter_layers: int = 2
    order: str = "pool_then_act"

    def deeponet(self, trunk_dim: int, input_shape) -> DeepOnetConfig:
        if self.branch == "conv":
            br = paper_conv_branch(input_shape, channels=self.channels, kernel=self.kernel,
                                   n_filter_layers=self.filter_layers, order=self.order,
                                   layer_norm=self.layer_norm, width=self.width, p=self.p)
        elif self.branch == "dense":
            br = paper_dense_branch(input_shape, layer_norm=self.layer_norm, width=self.width, p=self.p)
        else:
            raise ValueError(f"unknown branch kind {self.branch!r}")
        return DeepOnetConfig(branch=br, trunk=paper_trunk(trunk_dim, self.layer_norm, self.width, self.p))


VARIANTS = {
    "PIDON": ("pidon", "dense"), "PICON": ("pidon", "conv"),
    "APDON_V1": ("v1", "dense"), "APCON_V1": ("v1", "conv"),
    "APDON_V2": ("v2", "dense"), "APCON_V2": ("v2", "conv"),
}


@dataclass(frozen=True, eq=False)
class OperatorModel:
    kind: str
    nets: dict
    quad: VelocityQuadrature
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelKindError(self.kind)
        if tuple(self.nets) != NET_NAMES[self.kind]:
            raise ModelKindError(f"{self.kind} needs nets {NET_NAMES[self.kind]}, got {tuple(self.nets)}")

    @property
    def layout(self) -> ParamLayout:
        shapes = []
        for name, cfg in self.nets.items():
            shapes += [(f"{name}/{n}", s) for n, s in cfg.shapes()]
        return ParamLayout.from_shapes(shapes)

    def init(self, rng: np.random.Generator) -> ParameterVector:
        return ParameterVector.from_arrays(init_params(
            [(s.name, s.shape) for s in self.layout.segments], rng))

    def branch_outputs(self, flat, a_batch) -> dict:
        p = self.layout.unflatten(flat)
        return {name: branch_forward(cfg.branch, _sub(p, f"{name}/branch/"), a_batch)
                for name, cfg in self.nets.items()}

    def fields(self, flat, a_batch, branch_out: dict | None = None) -> dict:
        """One callable per net, G(coords...) -> (B, N). Branch outputs are
        computed once per call and shared by every query."""
        p = self.layout.unflatten(flat)
        if branch_out is None:
            branch_out = self.branch_outputs(flat, a_batch)
        out = {}
        for name, cfg in self.nets.items():
            tp = _sub(p, f"{name}/trunk/")
            b0 = p[f"{name}/b0"]
            b = branch_out[name]

            def G(*coords, cfg=cfg, tp=tp, b0=b0, b=b):
                y = jnp.stack(coords, axis=-1)
                return deeponet_combine(b, modified_mlp_forward(cfg.trunk, tp, y), b0)

            out[name] = G
        if self.kind == "pidon":
            raw = out["f"]
            out["f"] = lambda t, x, v, raw=raw: positive_wrap(raw(t, x, v))
        return out


def build_model(variant: str, input_shape=(32, 64), quad: VelocityQuadrature | None = None,
                net: NetSpec | None = None) -> OperatorModel:
    """One of the six named variants; CON variants use layer norm by default, DON variants do not."""
    try:
        kind, branch = VARIANTS[variant]
    except KeyError:
        raise ModelKindError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None
    if net is None:
        net = NetSpec(branch=branch, layer_norm=(branch == "conv"))
    elif net.branch != branch:
        raise ModelKindError(f"{variant} needs a {branch} branch")
    quad = quad or gauss_legendre(32)
    trunk_dims = {"f": 3, "rho": 2, "g": 3, "r": 3, "j": 3}
    nets = {n: net.deeponet(trunk_dims[n], input_shape) for n in NET_NAMES[kind]}
    return OperatorModel(kind=kind, nets=nets, quad=quad, name=variant)


# ---------------------------------------------------------------- pointwise API

def _check_kind(model, kind):
    if model.kind != kind:
        raise ModelKindError(f"expected a {kind} model, got {model.kind}")


def _one(v):
    return jnp.atleast_1d(jnp.asarray(v, dtype=jnp.float64))


def eval_f_pidon(model: OperatorModel, flat, a, t, x, v):
    _check_kind(model, "pidon")
    return model.fields(flat, jnp.asarray(a)[None])["f"](_one(t), _one(x), _one(v))[0]


def eval_rho_g_v1(model: OperatorModel, flat, a_batch, t, x):
    """rho (B, N) and g at every quadrature node (B, N, K)."""
    _check_kind(model, "v1")
    fl = model.fields(flat, a_batch)
    t, x = _one(t), _one(x)
    nodes, w, _ = _qarrays(model.quad)
    Gn = _per_node(fl["g"](*_node_grid(t, x, nodes)), t.shape[0], model.quad.n)
    return fl["rho"](t, x), Gn - _avg(Gn, w)[..., None]


def eval_rho_r_j_v2(model: OperatorModel, flat, a_batch, t, x):
    """rho (B, N), r and j at every quadrature node (B, N, K)."""
    _check_kind(model, "v2")
    q = model.quad
    nodes = np.asarray(q.nodes)
    if not np.array_equal(nodes, -nodes[q.mirror]):
        raise ValueError("quadrature nodes are not symmetric")
    fl = model.fields(flat, a_batch)
    t, x = _one(t), _one(x)
    grid = _node_grid(t, x, jnp.asarray(nodes))
    Grn = _per_node(fl["r"](*grid), t.shape[0], q.n)
    Gjn = _per_node(fl["j"](*grid), t.shape[0], q.n)
    return fl["rho"](t, x), 0.5 * (Grn + Grn[..., q.mirror]), Gjn - Gjn[..., q.mirror]


def interior_residuals(model: OperatorModel, fields: dict, problem: ProblemSpec, t, x, v) -> tuple:
    eps, q, src = problem.eps, model.quad, problem.source
    if model.kind == "pidon":
        return (pidon_interior(fields["f"], t, x, v, eps, q, src),)
    if model.kind == "v1":
        return v1_interior(fields["rho"], fields["g"], t, x, v, eps, q, src)
    return v2_interior(fields["rho"], fields["r"], fields["j"], t, x, v, eps, q, src)


def residual_pidon(model, flat, a, problem, point):
    _check_kind(model, "pidon")
    fl = model.fields(flat, jnp.asarray(a)[None])
    return interior_residuals(model, fl, problem, *map(_one, point))[0][0, 0]


def residual_v1(model, flat, a, problem, point):
    _check_kind(model, "v1")
    fl = model.fields(flat, jnp.asarray(a)[None])
    return tuple(jnp.broadcast_to(r, (1, 1))[0, 0] for r in interior_residuals(model, fl, problem, *map(_one, point)))


def residual_v2(model, flat, a, problem, point):
    _check_kind(model, "v2")
    fl = model.fields(flat, jnp.asarray(a)[None])
    return tuple(jnp.broadcast_to(r, (1, 1))[0, 0] for r in interior_residuals(model, fl, problem, *map(_one, point)))


def boundary_value(problem: ProblemSpec, x_side: float, v: float) -> float:
    bc = problem.boundary
    xl, xr = problem.x_range
    if isinstance(bc, Dirichlet):
        return bc.value
    if x_side == xl and v > 0:
        return bc.left_value
    if x_side == xr and v < 0:
        return bc.right_value
    raise ValueError(f"v = {v} is not incoming at x = {x_side}")


def boundary_residual_fields(model, fields, problem, bt, bx, bv, bval):
    return reconstruct_f(model.kind, fields, bt, bx, bv, problem.eps, model.quad) - bval


def boundary_residual(model, flat, a, problem, t, v, side: str):
    x_side = problem.x_range[0] if side == "left" else problem.x_range[1]
    val = boundary_value(problem, x_side, v)
    fl = model.fields(flat, jnp.asarray(a)[None])
    return boundary_residual_fields(model, fl, problem, _one(t), _one(x_side), _one(v), val)[0, 0]


def initial_residual_grid(model, fields, problem, a_batch, x_grid, v_grid):
    f = reconstruct_f_grid(model.kind, fields, 0.0, x_grid, v_grid, problem.eps, model.quad)
    return f - a_batch


def initial_residual(model, flat, a, problem, x_grid, v_grid, i: int, j: int):
    """Residual at grid node (x_grid[i], v_grid[j]); off-grid indices raise IndexError."""
    a = jnp.asarray(a)
    if not (0 <= i < len(x_grid) and 0 <= j < len(v_grid)):
        raise IndexError(f"({i}, {j}) is not a grid coordinate")
    fl = model.fields(flat, a[None])
    f = reconstruct_f(model.kind, fl, _one(0.0), _one(x_grid[i]), _one(v_grid[j]), problem.eps, model.quad)
    return f[0, 0] - a[i, j]


# ---------------------------------------------------------------- risks

def risk_terms_from_fields(model, fields, problem, a_batch, batch_arrays, x_grid, v_grid) -> dict:
    """Per-sample mean squared residual of every family, each of shape (B,)."""
    t, x, v, bt, bx, bv, bval = batch_arrays
    B = a_batch.shape[0]
    names = TERM_NAMES[model.kind]
    interior = interior_residuals(model, fields, problem, t, x, v)
    out = {}
    for name, res in zip(names, interior):
        res = jnp.broadcast_to(res, (B, t.shape[0]))
        out[name] = jnp.mean(res**2, axis=-1)
    bres = jnp.broadcast_to(boundary_residual_fields(model, fields, problem, bt, bx, bv, bval), (B, bt.shape[0]))
    out["boundary"] = jnp.mean(bres**2, axis=-1)
    ires = initial_residual_grid(model, fields, problem, a_batch, x_grid, v_grid)
    out["initial"] = jnp.mean(ires.reshape(B, -1) ** 2, axis=-1)
    return out


def empirical_risk_terms(model: OperatorModel, flat, a_batch, batch: CollocationBatch, problem: ProblemSpec):
    """(risk, {term: per-sample values}). All terms carry unit weight."""
    a_batch = jnp.asarray(a_batch)
    if a_batch.ndim != 3 or a_batch.shape[0] == 0:
        raise ValueError("need a non-empty batch of input functions (B, H, W)")
    fields = model.fields(flat, a_batch)
    terms = risk_terms_from_fields(model, fields, problem, a_batch,
                                   tuple(jnp.asarray(z) for z in batch.arrays()), batch.x_grid, batch.v_grid)
    per_sample = sum(terms.values())
    return jnp.mean(per_sample), terms


def empirical_risk(model, flat, a_batch, batch, problem):
    return empirical_risk_terms(model, flat, a_batch, batch, problem)[0]


def make_risk_fn(model: OperatorModel, problem: ProblemSpec, x_grid, v_grid):
    """Pure ``risk(flat, a_batch, batch_arrays) -> (risk, terms)`` suitable for jit."""
    x_grid = np.asarray(x_grid, float)
    v_grid = np.asarray(v_grid, float)

    def risk(flat, a_batch, batch_arrays):
        fields = model.fields(flat, a_batch)
        terms = risk_terms_from_fields(model, fields, problem, a_batch, batch_arrays, x_grid, v_grid)
        means = {k: jnp.mean(v) for k, v in terms.items()}
        return sum(means.values()), means

    return risk


# ---------------------------------------------------------------- density

def density_from_fields(model: OperatorModel, fields: dict, t_grid, x_grid):
    """rho on the tensor grid t_grid x x_grid, shape (B, nt, nx)."""
    t_grid = jnp.asarray(t_grid)
    x_grid = jnp.asarray(x_grid)
    nt, nx = t_grid.shape[0], x_grid.shape[0]
    tt = jnp.repeat(t_grid, nx)
    xx = jnp.tile(x_grid, nt)
    if model.kind == "pidon":
        nodes, w, _ = _qarrays(model.quad)
        fn = _per_node(fields["f"](*_node_grid(tt, xx, nodes)), tt.shape[0], model.quad.n)
        rho = _avg(fn, w)
    else:
        rho = fields["rho"](tt, xx)
    return jnp.asarray(rho).reshape(-1, nt, nx)


def make_density_fn(model: OperatorModel, t_grid, x_grid):
    t_grid = np.asarray(t_grid, float)
    x_grid = np.asarray(x_grid, float)

    def density(flat, a_batch):
        return density_from_fields(model, model.fields(flat, a_batch), t_grid, x_grid)

    return jax.jit(density)
