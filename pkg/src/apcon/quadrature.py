"""Gauss-Legendre velocity quadrature for the average <f> = 1/2 int_{-1}^{1} f dv."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class QuadratureConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class VelocityQuadrature:
    """Nodes in (-1, 1) sorted ascending, weights normalised to sum to one.

    ``mirror[k]`` is the index of the node ``-nodes[k]``; nodes are built so
    that this reflection is exact in floating point.
    """

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.nodes.size

    @property
    def mirror(self) -> np.ndarray:
        return np.arange(self.n)[::-1].copy()


def _legendre_and_derivative(n: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p_prev = np.ones_like(x)
    p = x.copy()
    for k in range(1, n):
        p_prev, p = p, ((2 * k + 1) * x * p - k * p_prev) / (k + 1)
    dp = n * (x * p - p_prev) / (x * x - 1.0)
    return p, dp


def gauss_legendre(n: int = 32) -> VelocityQuadrature:
    """n-point rule via Newton iteration on P_n, weights divided by two.

    Only even n are accepted: a node at v = 0 would pair with itself and
    break the parity split used by the even-odd model.
    """
    if n < 2 or n % 2:
        raise QuadratureConfigError(f"need an even number of nodes >= 2, got {n}")
    m = n // 2
    k = np.arange(1, m + 1)
    # Tricomi initial guess for the positive roots, largest first
    x = np.cos(np.pi * (k - 0.25) / (n + 0.5))
    for _ in range(100):
        p, dp = _legendre_and_derivative(n, x)
        dx = p / dp
        x = x - dx
        if np.max(np.abs(dx)) < 1e-16:
            break
    _, dp = _legendre_and_derivative(n, x)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    pos = x[::-1]
    wpos = w[::-1] / 2.0
    nodes = np.concatenate([-pos[::-1], pos])
    weights = np.concatenate([wpos[::-1], wpos])
    # renormalise in extended precision so sum(weights) == 1 to rounding
    weights = weights / np.sum(weights.astype(np.longdouble)).astype(np.float64)
    return VelocityQuadrature(nodes=nodes, weights=weights)


def moment(q: VelocityQuadrature, f_at_nodes) -> np.ndarray:
    """Quadrature average over the last axis."""
    f = np.asarray(f_at_nodes)
    if f.shape[-1] != q.n:
        raise ValueError(f"expected {q.n} node values on the last axis, got {f.shape[-1]}")
    return 0.5 * (f + f[..., q.mirror]) @ q.weights


def collision(q: VelocityQuadrature, f_at_nodes) -> np.ndarray:
    """L f = <f> - f evaluated at each node (last axis)."""
    f = np.asarray(f_at_nodes)
    return moment(q, f)[..., None] - f
