"""Gaussian quadrature rules used across the package.

All rules integrate against the standard normal density (probabilists'
normalization): sum_q w_q f(x_q) ~ E f(Z), Z ~ N(0,1)^dim.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import roots_hermitenorm, roots_legendre


@lru_cache(maxsize=64)
def gauss_hermite(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for E f(Z) with one standard normal Z.

    Exact for polynomials of degree < 2 * order.
    """
    if order < 1:
        raise ValueError("quadrature order must be >= 1")
    x, w = roots_hermitenorm(order)
    return x, w / np.sqrt(2.0 * np.pi)


def tensor_gauss_hermite(dim: int, order: int, max_points: int = 200_000):
    """Tensorized rule for E f(Z), Z ~ N(0, I_dim).

    Returns (points, weights) with points of shape (Q, dim).
    """
    if order**dim > max_points:
        raise ValueError(
            f"tensor rule with {order}^{dim} points exceeds the {max_points} cap"
        )
    x, w = gauss_hermite(order)
    if dim == 0:
        return np.zeros((1, 0)), np.ones(1)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    points = np.stack([g.reshape(-1) for g in grids], axis=-1)
    weights = np.ones(points.shape[0])
    for k in range(dim):
        weights *= w[np.searchsorted(x, points[:, k])]
    return points, weights


def _normal_pdf(x: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def panel_normal_rule(
    breakpoints: np.ndarray, order: int = 32
) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre rule for E f(Z) on given z-breakpoints.

    ``breakpoints`` may be batched with shape (..., n_edges); nodes/weights get
    shape (..., (n_edges-1)*order).  Mass outside [breakpoints[0], [-1]] is
    dropped, so the edges should span the relevant range (|z| ~ 12).

    Node positions cluster at panel edges, which resolves integrands with a
    kink when a breakpoint is placed at the kink location.
    """
    t, u = roots_legendre(order)
    bp = np.asarray(breakpoints, dtype=float)
    lo, hi = bp[..., :-1], bp[..., 1:]
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    nodes = mid[..., None] + half[..., None] * t  # (..., n_panels, order)
    weights = half[..., None] * u * _normal_pdf(nodes)
    shape = nodes.shape[:-2] + (-1,)
    return nodes.reshape(shape), weights.reshape(shape)
