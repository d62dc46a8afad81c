"""Random initial functions f0(x, v) for Problems I and II, and dataset files."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from apcon.container import CorruptFileError, read_container, write_container


class ConfigurationError(ValueError):
    pass


class FactorizationError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Grid:
    """H uniform x-points on [x_L, x_R] (rows) and W uniform v-points on [-1, 1] (columns)."""
    h: int = 32
    w: int = 64
    x_range: tuple[float, float] = (0.0, 1.0)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_range[0], self.x_range[1], self.h)

    @property
    def v(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.w)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.v, indexing="ij")

    def points(self) -> np.ndarray:
        X, V = self.mesh()
        return np.stack([X.ravel(), V.ravel()], axis=1)


@dataclass
class InitialFunctionSample:
    values: np.ndarray
    x_grid: np.ndarray
    v_grid: np.ndarray
    problem_id: str


# ---------------------------------------------------------------- GRF

def rbf_kernel(z, y, l: float):
    """exp(-|z - y|^2 / (2 l^2)) between point sets (n, d) and (m, d)."""
    z = np.atleast_2d(z)
    y = np.atleast_2d(y)
    d2 = np.sum((z[:, None, :] - y[None, :, :]) ** 2, axis=-1)
    return np.exp(-d2 / (2.0 * l * l))


def covariance_factor(points, l: float) -> np.ndarray:
    """Lower Cholesky factor of the kernel matrix plus diagonal jitter,
    starting at 1e-6 and escalating by 10x up to 1e-4."""
    if l <= 0:
        raise ConfigurationError("length scale must be positive")
    K = rbf_kernel(points, points, l)
    for jitter in (1e-6, 1e-5, 1e-4):
        try:
            return np.linalg.cholesky(K + jitter * np.eye(K.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError(f"covariance not positive definite even with jitter 1e-4 (l={l})")


@lru_cache(maxsize=8)
def _cached_factor(grid: Grid, l: float) -> np.ndarray:
    return covariance_factor(grid.points(), l)


def grf_sample(grid_points, l: float, rng: np.random.Generator, factor: np.ndarray | None = None) -> np.ndarray:
    """One mean-zero Gaussian field draw at ``grid_points``."""
    L = covariance_factor(grid_points, l) if factor is None else factor
    return L @ rng.standard_normal(L.shape[0])


# ---------------------------------------------------------------- problem data

def relu3(s):
    return np.maximum(s, 0.0) ** 3


def problem1_formula(x, v, f_tilde):
    """Inflow-compatible blend: equals 1 at (0, v > 0) and 1/2 at (1, v < 0) for any f_tilde."""
    return (relu3(v) * x + relu3(-v) * (1.0 - x)) * f_tilde + (1.0 - 0.5 * x)


def problem2_formula(x, v, r):
    return r * (1.0 + np.sin(2 * np.pi * x - np.pi / 2)) * 3.0 * np.exp(-((3 * v) ** 2) / 2)


def make_problem1_initial(rng: np.random.Generator, grid: Grid = Grid(), l: float = 0.5,
                          max_rejections: int = 100) -> InitialFunctionSample:
    """Draw GRF perturbations until the blended f0 is positive everywhere on the grid."""
    if grid.x_range != (0.0, 1.0):
        raise ConfigurationError("Problem I data is defined on x in [0, 1]")
    L = _cached_factor(grid, l)
    X, V = grid.mesh()
    for _ in range(max_rejections):
        f_tilde = grf_sample(None, l, rng, factor=L).reshape(X.shape)
        f0 = problem1_formula(X, V, f_tilde)
        if np.all(f0 > 0):
            return InitialFunctionSample(f0, grid.x, grid.v, "I")
    raise ConfigurationError(f"no positive Problem I sample after {max_rejections} draws")


def make_problem2_initial(rng: np.random.Generator, grid: Grid = Grid()) -> InitialFunctionSample:
    if grid.x_range != (0.0, 1.0):
        raise ConfigurationError("Problem II data is defined on x in [0, 1]")
    X, V = grid.mesh()
    r = rng.uniform(0.0, 1.0)
    return InitialFunctionSample(problem2_formula(X, V, r), grid.x, grid.v, "II")


def generate_samples(problem_id: str, m: int, seed: int, grid: Grid = Grid(), l: float = 0.5):
    """``m`` samples with one independent rng stream per sample."""
    streams = np.random.SeedSequence(seed).spawn(m)
    out = []
    for ss in streams:
        rng = np.random.default_rng(ss)
        if problem_id == "I":
            out.append(make_problem1_initial(rng, grid, l))
        elif problem_id == "II":
            out.append(make_problem2_initial(rng, grid))
        else:
            raise ConfigurationError(f"unknown problem {problem_id!r}")
    return out


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    train: np.ndarray
    test: np.ndarray
    x_grid: np.ndarray
    v_grid: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def problem_id(self) -> str:
        return self.meta.get("problem", "")

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.meta == other.meta
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("train", "test", "x_grid", "v_grid")))


def split(samples, ratio=(7, 1), seed: int = 0, meta: dict | None = None) -> Dataset:
    """Shuffle with ``seed`` and split train:test by ``ratio``; the test share is
    floor(n * test / total) and the remainder goes to training."""
    a, b = ratio
    if a <= 0 or b <= 0 or int(a) != a or int(b) != b:
        raise ConfigurationError("ratio must be two positive integers")
    n = len(samples)
    n_test = n * b // (a + b)
    order = np.random.default_rng(seed).permutation(n)
    values = np.stack([s.values for s in samples])
    meta = dict(meta or {})
    meta.update(split_ratio=[int(a), int(b)], split_seed=int(seed), m=n,
                problem=samples[0].problem_id if samples else meta.get("problem", ""))
    return Dataset(train=values[np.sort(order[n_test:])], test=values[np.sort(order[:n_test])],
                   x_grid=samples[0].x_grid, v_grid=samples[0].v_grid, meta=meta)


def make_dataset(problem_id: str, m: int = 1024, l: float = 0.5, seed: int = 0,
                 grid: Grid = Grid(), ratio=(7, 1)) -> Dataset:
    samples = generate_samples(problem_id, m, seed, grid, l)
    meta = {"problem": problem_id, "l": l, "seed": seed, "kernel": "exp_quadratic", "h": grid.h, "w": grid.w}
    return split(samples, ratio, seed=seed, meta=meta)


def save(dataset: Dataset, path) -> None:
    write_container(path, {"train": dataset.train, "test": dataset.test,
                           "x_grid": dataset.x_grid, "v_grid": dataset.v_grid},
                    meta=dataset.meta, kind="dataset")


def load(path) -> Dataset:
    arrays, meta, kind = read_container(path)
    if kind != "dataset":
        raise CorruptFileError(f"{path} holds {kind!r}, not a dataset")
    try:
        return Dataset(arrays["train"], arrays["test"], arrays["x_grid"], arrays["v_grid"], meta)
    except KeyError as exc:
        raise CorruptFileError(f"{path}: missing array {exc}") from exc


def export_csv(dataset: Dataset, path, which: str = "test") -> None:
    """Long-format CSV: split, sample, x, v, f0."""
    values = getattr(dataset, which)
    with open(Path(path), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["split", "sample", "x", "v", "f0"])
        for s, arr in enumerate(values):
            for i, x in enumerate(dataset.x_grid):
                for j, v in enumerate(dataset.v_grid):
                    wr.writerow([which, s, repr(float(x)), repr(float(v)), repr(float(arr[i, j]))])
