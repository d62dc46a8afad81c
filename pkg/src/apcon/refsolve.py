"""Reference density fields.

* :func:`solve_transport_ap`: micro-macro discrete-velocity scheme on a
  staggered grid (rho on nodes, g on cell midpoints). The collision term is
  implicit, transport is upwinded, and the step stays stable uniformly in
  eps; as eps -> 0 it reduces to an explicit central scheme for
  rho_t = rho_xx / 3.
* :func:`solve_heat_cn`: Crank-Nicolson for the diffusion limit.
* :func:`heat_kernel`, :func:`heat_convolution`, :func:`duhamel`: whole-line
  solutions by quadrature of the fundamental solution.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import solve_banded

from apcon.container import read_container, write_container
from apcon.physics import Dirichlet, Inflow, ProblemSpec
from apcon.quadrature import VelocityQuadrature, gauss_legendre


class InstabilityError(FloatingPointError):
    pass


class AccuracyError(ArithmeticError):
    pass


class DomainError(ValueError):
    pass


@dataclass
class DensityField:
    rho: np.ndarray          # (nt, nx)
    t_grid: np.ndarray
    x_grid: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rho.shape != (self.t_grid.size, self.x_grid.size):
            raise ValueError(f"rho shape {self.rho.shape} does not match grids "
                             f"({self.t_grid.size}, {self.x_grid.size})")

    def at(self, t_eval, x_eval) -> "DensityField":
        """Bilinear interpolation onto a tensor grid."""
        t_eval = np.asarray(t_eval, float)
        x_eval = np.asarray(x_eval, float)
        interp = RegularGridInterpolator((self.t_grid, self.x_grid), self.rho)
        T, X = np.meshgrid(t_eval, x_eval, indexing="ij")
        rho = interp(np.stack([T.ravel(), X.ravel()], axis=1)).reshape(T.shape)
        return DensityField(rho, t_eval, x_eval, dict(self.meta))

    def save(self, path) -> None:
        write_container(path, {"rho": self.rho, "t_grid": self.t_grid, "x_grid": self.x_grid},
                        meta=self.meta, kind="density")

    @classmethod
    def load(cls, path) -> "DensityField":
        arrays, meta, kind = read_container(path)
        if kind != "density":
            raise ValueError(f"{path} holds {kind!r}, not a density field")
        return cls(arrays["rho"], arrays["t_grid"], arrays["x_grid"], meta)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "x", "rho"])
            for i, t in enumerate(self.t_grid):
                for j, x in enumerate(self.x_grid):
                    wr.writerow([repr(float(t)), repr(float(x)), repr(float(self.rho[i, j]))])


# ---------------------------------------------------------------- kinetic scheme

@dataclass(frozen=True)
class KineticGrid:
    nx: int
    quad: VelocityQuadrature
    dt: float
    nt: int
    dt_bound: float

    @property
    def t_max(self) -> float:
        return self.nt * self.dt


def stable_dt(eps: float, dx: float, quad: VelocityQuadrature) -> float:
    """Largest step of the scheme: transport limit eps dx / max|v| plus the
    diffusion limit dx^2 / (2 <v^2>)."""
    vmax = float(np.max(np.abs(quad.nodes)))
    v2 = float(quad.weights @ quad.nodes**2)
    return eps * dx / vmax + dx * dx / (2.0 * v2)


def kinetic_grid(problem: ProblemSpec, nx: int = 200, quad: VelocityQuadrature | None = None,
                 safety: float = 0.5) -> KineticGrid:
    quad = quad or gauss_legendre(32)
    dx = (problem.x_range[1] - problem.x_range[0]) / nx
    bound = stable_dt(problem.eps, dx, quad)
    nt = max(1, math.ceil(problem.t_max / (safety * bound)))
    return KineticGrid(nx=nx, quad=quad, dt=problem.t_max / nt, nt=nt, dt_bound=bound)


def _interp_f0(f0_values, x_grid, v_grid, x_pts, v_pts):
    interp = RegularGridInterpolator((np.asarray(x_grid, float), np.asarray(v_grid, float)),
                                     np.asarray(f0_values, float))
    X, V = np.meshgrid(x_pts, v_pts, indexing="ij")
    return interp(np.stack([X.ravel(), V.ravel()], axis=1)).reshape(X.shape)


def _boundary_state(problem: ProblemSpec, g_first, g_last, v, w, eps):
    """Boundary densities and ghost micro parts from the kinetic boundary data.

    Inflow: outgoing f is extrapolated as rho_b + eps g(first cell), incoming
    f is prescribed; solving rho_b = <f_b> gives rho_b = value + 2 eps <g 1_out>.
    """
    bc = problem.boundary
    if isinstance(bc, Dirichlet):
        zero = np.zeros_like(g_first)
        return bc.value, bc.value, zero, zero
    out_l = v < 0
    out_r = v > 0
    rho_l = bc.left_value + 2.0 * eps * np.sum(w[out_l] * g_first[out_l])
    rho_r = bc.right_value + 2.0 * eps * np.sum(w[out_r] * g_last[out_r])
    gl = np.where(out_l, g_first, (bc.left_value - rho_l) / eps)
    gr = np.where(out_r, g_last, (bc.right_value - rho_r) / eps)
    return rho_l, rho_r, gl, gr


def solve_transport_ap(problem: ProblemSpec, f0_values, x_grid, v_grid, grid: KineticGrid | None = None,
                       record_every: int = 1) -> DensityField:
    """March the micro-macro system from f0 sampled on (x_grid, v_grid).

    Returns rho = <f> on the scheme's nodes at every ``record_every``-th step
    (the final time is always recorded).
    """
    grid = grid or kinetic_grid(problem)
    eps = problem.eps
    q = grid.quad
    v, w = q.nodes, q.weights
    xl, xr = problem.x_range
    nx, dt = grid.nx, grid.dt
    dx = (xr - xl) / nx
    xn = np.linspace(xl, xr, nx + 1)
    xm = 0.5 * (xn[1:] + xn[:-1])

    rho = _interp_f0(f0_values, x_grid, v_grid, xn, v) @ w
    fm = _interp_f0(f0_values, x_grid, v_grid, xm, v)
    g = (fm - (fm @ w)[:, None]) / eps
    vp, vm = np.maximum(v, 0.0), np.minimum(v, 0.0)
    src = problem.source
    relax = 1.0 + dt / eps**2
    scale = max(1.0, float(np.max(np.abs(rho))))

    times, hist = [0.0], [rho.copy()]
    for n in range(grid.nt):
        t = n * dt
        rho_l, rho_r, gl, gr = _boundary_state(problem, g[0], g[-1], v, w, eps)
        rho[0], rho[-1] = rho_l, rho_r
        gext = np.vstack([gl, g, gr])
        dg = np.diff(gext, axis=0) / dx                       # (nx + 1, K) differences at nodes
        transport = vp * dg[:-1] + vm * dg[1:]
        transport -= (transport @ w)[:, None]
        drho = np.diff(rho) / dx
        g = (g - dt / eps * transport - dt / eps**2 * v[None, :] * drho[:, None]) / relax
        flux = (g * v) @ w
        rho[1:-1] -= dt * np.diff(flux) / dx
        if src is not None:
            rho[1:-1] += dt * np.asarray(src(t, xn[1:-1]))
        rho_l, rho_r, _, _ = _boundary_state(problem, g[0], g[-1], v, w, eps)
        rho[0], rho[-1] = rho_l, rho_r
        if not np.all(np.isfinite(rho)) or np.max(np.abs(rho)) > 1e6 * scale:
            raise InstabilityError(f"density blew up at step {n + 1}; dt = {dt:.3e} must stay below "
                                   f"the bound {grid.dt_bound:.3e} (eps dx / max|v| + dx^2 / (2 <v^2>))")
        if (n + 1) % record_every == 0 or n + 1 == grid.nt:
            times.append(problem.t_max if n + 1 == grid.nt else (n + 1) * dt)
            hist.append(rho.copy())
    meta = {"solver": "micro-macro AP", "eps": eps, "nx": nx, "dt": dt, "nt": grid.nt,
            "dt_bound": grid.dt_bound, "n_velocities": q.n}
    return DensityField(np.array(hist), np.array(times), xn, meta)


# ---------------------------------------------------------------- heat equation

@dataclass(frozen=True)
class HeatGrid:
    nx: int
    nt: int
    x_range: tuple[float, float] = (0.0, 1.0)
    t_max: float = 0.1


def diffusion_boundary(problem: ProblemSpec) -> tuple[float, float]:
    bc = problem.boundary
    if isinstance(bc, Dirichlet):
        return bc.value, bc.value
    return bc.left_value, bc.right_value


def solve_heat_cn(k: float, rho0, boundary, grid: HeatGrid, source: Callable | None = None) -> DensityField:
    """Crank-Nicolson for rho_t = k rho_xx + Q with Dirichlet values ``boundary``
    (a pair of numbers or of callables of t)."""
    if k <= 0:
        raise ValueError("diffusivity must be positive")
    xl, xr = grid.x_range
    x = np.linspace(xl, xr, grid.nx + 1)
    dx = (xr - xl) / grid.nx
    dt = grid.t_max / grid.nt
    rho = np.array(rho0(x) if callable(rho0) else rho0, dtype=float)
    if rho.shape != x.shape:
        raise ValueError(f"rho0 must have {x.size} node values")
    bl, br = (b if callable(b) else (lambda t, b=b: b) for b in boundary)
    rho[0], rho[-1] = bl(0.0), br(0.0)
    mu = k * dt / dx**2
    m = grid.nx - 1
    ab = np.zeros((3, m))
    ab[0, 1:] = -mu / 2
    ab[1, :] = 1 + mu
    ab[2, :-1] = -mu / 2
    hist = [rho.copy()]
    for n in range(grid.nt):
        t0, t1 = n * dt, (n + 1) * dt
        lap = rho[:-2] - 2 * rho[1:-1] + rho[2:]
        rhs = rho[1:-1] + mu / 2 * lap
        if source is not None:
            rhs += dt / 2 * (np.asarray(source(t0, x[1:-1])) + np.asarray(source(t1, x[1:-1])))
        new_l, new_r = bl(t1), br(t1)
        rhs[0] += mu / 2 * new_l
        rhs[-1] += mu / 2 * new_r
        inner = solve_banded((1, 1), ab, rhs)
        rho = np.concatenate([[new_l], inner, [new_r]])
        hist.append(rho)
    return DensityField(np.array(hist), np.linspace(0.0, grid.t_max, grid.nt + 1), x,
                        {"solver": "crank-nicolson", "k": k, "nx": grid.nx, "nt": grid.nt})


def diffusion_limit(problem: ProblemSpec, f0_values, x_grid, v_grid, nx: int = 200, nt: int = 2000,
                    quad: VelocityQuadrature | None = None) -> DensityField:
    """Heat-equation solution (k = 1/3) started from rho0 = <f0>."""
    quad = quad or gauss_legendre(32)
    xn = np.linspace(problem.x_range[0], problem.x_range[1], nx + 1)
    rho0 = _interp_f0(f0_values, x_grid, v_grid, xn, quad.nodes) @ quad.weights
    grid = HeatGrid(nx=nx, nt=nt, x_range=problem.x_range, t_max=problem.t_max)
    return solve_heat_cn(1.0 / 3.0, rho0, diffusion_boundary(problem), grid, problem.source)


# ---------------------------------------------------------------- heat kernel

def heat_kernel(t, x, k: float):
    """(4 pi k t)^(-1/2) exp(-x^2 / (4 k t))."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise DomainError("the heat kernel needs t > 0")
    return np.exp(-np.asarray(x, float) ** 2 / (4 * k * t)) / np.sqrt(4 * np.pi * k * t)


_REACH = 9.0   # exp(-81) is far below double precision relative to the peak


def _gauss_average(fun, tol):
    """(1 / sqrt(pi)) int exp(-s^2) fun(s) ds by adaptive quadrature."""
    val, err = integrate.quad(lambda s: math.exp(-s * s) * fun(s), -_REACH, _REACH,
                              epsabs=tol, epsrel=tol, limit=400)
    if not np.isfinite(val) or err > 100 * tol * max(1.0, abs(val)):
        raise AccuracyError(f"quadrature did not converge (estimated error {err:.2e})")
    return val / math.sqrt(math.pi)


def heat_convolution(g: Callable, t: float, k: float, x_eval, tol: float = 1e-12) -> np.ndarray:
    """u(t, x) = int Phi(t, x - y) g(y) dy, using y = x + 2 sqrt(k t) s."""
    if t <= 0:
        raise DomainError("t must be positive")
    c = 2.0 * math.sqrt(k * t)
    return np.array([_gauss_average(lambda s, x=x: g(x + c * s), tol) for x in np.atleast_1d(x_eval)])


def duhamel(g: Callable, f_source: Callable, t: float, k: float, x_eval, tol: float = 1e-10) -> np.ndarray:
    """Whole-line solution of u_t - k u_xx = f, u(0) = g at time t."""
    hom = heat_convolution(g, t, k, x_eval, tol)
    out = []
    for x in np.atleast_1d(x_eval):
        def inner(s, x=x):
            c = 2.0 * math.sqrt(k * (t - s))
            return _gauss_average(lambda z: f_source(s, x + c * z), tol)
        val, err = integrate.quad(inner, 0.0, t, epsabs=tol, epsrel=tol, limit=200)
        if err > 100 * tol * max(1.0, abs(val)):
            raise AccuracyError(f"time integral did not converge (estimated error {err:.2e})")
        out.append(val)
    return hom + np.array(out)
