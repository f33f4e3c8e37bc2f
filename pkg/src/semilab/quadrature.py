"""Deterministic quadrature rules used across the package.

Two families cover every need here: composite Gauss-Legendre on finite
intervals (time integrals, the covariance integral) and tensor-product
Gauss-Hermite for Gaussian expectations in low dimension.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import InputError


@lru_cache(maxsize=128)
def _leggauss(order: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(order)
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


@lru_cache(maxsize=64)
def _hermgauss(order: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.hermite.hermgauss(order)
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


def gauss_legendre_rule(a: float, b: float, panels: int, order: int
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of a composite Gauss-Legendre rule on [a, b].

    Parameters
    ----------
    a, b : float
        Interval endpoints, ``a <= b``.
    panels : int
        Number of equal subintervals.
    order : int
        Gauss-Legendre order per subinterval.

    Returns
    -------
    nodes, weights : ndarray
        Flat arrays of length ``panels * order``; the weights sum to b - a.
    """
    if b < a:
        raise InputError(f"interval reversed: [{a}, {b}]")
    if panels < 1 or order < 1:
        raise InputError("panels and order must be >= 1")
    x, w = _leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    mid = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * (edges[1] - edges[0])
    nodes = (mid[:, None] + half * x[None, :]).ravel()
    weights = np.broadcast_to(half * w, (panels, order)).ravel().copy()
    return nodes, weights


def split_rule(total_nodes: int, length: float, max_panel_width: float = 1.0
               ) -> tuple[int, int]:
    """Choose (panels, order) for about ``total_nodes`` over an interval."""
    panels = max(1, int(np.ceil(length / max_panel_width)))
    order = max(2, int(np.ceil(total_nodes / panels)))
    return panels, order


def gauss_hermite_points(cov: np.ndarray, nodes_per_axis: int,
                         active_tol: float = 1e-13
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Points and weights integrating against N(0, cov).

    The covariance is diagonalised and only directions whose eigenvalue
    exceeds ``active_tol * max(eig)`` carry quadrature nodes; degenerate
    directions contribute a point mass at zero.  The returned weights sum
    to 1.

    Returns
    -------
    points : ndarray, shape (m, d)
    weights : ndarray, shape (m,)
    """
    cov = np.asarray(cov, dtype=float)
    d = cov.shape[0]
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    evals = np.clip(evals, 0.0, None)
    top = evals.max(initial=0.0)
    active = np.flatnonzero(evals > active_tol * max(top, 1.0) + 0.0)
    if active.size == 0:
        return np.zeros((1, d)), np.ones(1)
    x, w = _hermgauss(nodes_per_axis)
    # N(0,1) expectation: E f = pi^{-1/2} sum w_i f(sqrt(2) x_i)
    z = np.sqrt(2.0) * x
    wz = w / np.sqrt(np.pi)
    grids = np.meshgrid(*([z] * active.size), indexing="ij")
    pts_active = np.stack([g.ravel() for g in grids], axis=1)
    wgrids = np.meshgrid(*([wz] * active.size), indexing="ij")
    weights = np.ones(pts_active.shape[0])
    for g in wgrids:
        weights = weights * g.ravel()
    scaled = pts_active * np.sqrt(evals[active])[None, :]
    points = scaled @ evecs[:, active].T
    return points, weights
