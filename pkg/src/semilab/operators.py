"""Dense operator algebra: matrix exponential action, the covariance
integral, and Gaussian sampling.

Everything here is finite-dimensional and immutable.  The covariance
operator of the driven linear flow,

    C(t) = integral_0^t  e^{sA} Q e^{sA^T} ds,

is computed by composite Gauss-Legendre quadrature of the defining
integrand, so refining the rule gives a built-in error test.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ContractViolation, InputError, NumericalError
from .quadrature import gauss_legendre_rule, split_rule
from .rng import make_generator

__all__ = [
    "LinearOperator",
    "CovarianceOperator",
    "expm_apply",
    "covariance_Qt",
    "gaussian_sample",
    "operator_norm",
    "log_norm",
    "flow_covariance_table",
]


def _as_square_matrix(entries, name: str) -> np.ndarray:
    m = np.array(entries, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
        raise ContractViolation(f"{name} must be a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InputError(f"{name} has non-finite entries")
    return m


@dataclass(frozen=True)
class LinearOperator:
    """Dense real operator on R^d.

    ``self_adjoint`` is a declared flag; when set, the entries must be
    symmetric to machine-level tolerance.
    """

    entries: np.ndarray
    self_adjoint: bool = False

    def __post_init__(self):
        m = _as_square_matrix(self.entries, "operator")
        if self.self_adjoint:
            gap = np.max(np.abs(m - m.T))
            scale = 1.0 + np.max(np.abs(m))
            if gap > 1e-12 * scale:
                raise ContractViolation(
                    f"self_adjoint flag set but max|M - M^T| = {gap:.3e}")
        m.flags.writeable = False
        object.__setattr__(self, "entries", m)

    @classmethod
    def from_matrix(cls, entries) -> "LinearOperator":
        """Build an operator, auto-detecting the self-adjoint flag."""
        m = _as_square_matrix(entries, "operator")
        sym = np.max(np.abs(m - m.T)) <= 1e-12 * (1.0 + np.max(np.abs(m)))
        return cls(m, self_adjoint=bool(sym))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class CovarianceOperator:
    """Symmetric positive semidefinite operator on R^d.

    Mild asymmetry (relative 1e-12) is symmetrised away; eigenvalues below
    ``-1e-10 * trace`` are rejected rather than repaired.
    """

    entries: np.ndarray
    _evals: np.ndarray = field(repr=False, compare=False, default=None)
    _evecs: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        m = _as_square_matrix(self.entries, "covariance")
        gap = np.max(np.abs(m - m.T))
        if gap > 1e-12 * (1.0 + np.max(np.abs(m))):
            raise ContractViolation(f"covariance not symmetric: max|C - C^T| = {gap:.3e}")
        m = 0.5 * (m + m.T)
        try:
            evals, evecs = np.linalg.eigh(m)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - eigh on finite sym
            raise NumericalError(f"eigendecomposition failed: {exc}") from exc
        tr = float(np.trace(m))
        floor = -1e-10 * max(tr, 0.0)
        if evals.min(initial=0.0) < floor:
            raise ContractViolation(
                f"covariance indefinite: min eigenvalue {evals.min():.3e} < {floor:.3e}")
        evals = np.clip(evals, 0.0, None)
        for a in (m, evals, evecs):
            a.flags.writeable = False
        object.__setattr__(self, "entries", m)
        object.__setattr__(self, "_evals", evals)
        object.__setattr__(self, "_evecs", evecs)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def eig(self) -> tuple[np.ndarray, np.ndarray]:
        """Clamped eigenvalues (ascending) and eigenvectors."""
        return self._evals, self._evecs

    def sampling_matrix(self) -> np.ndarray:
        """S with S S^T equal to the covariance; samples are z @ S.T."""
        return self._evecs * np.sqrt(self._evals)[None, :]


def expm_apply(A: LinearOperator, t: float, x: np.ndarray) -> np.ndarray:
    """Apply the flow map e^{tA} to a vector (or to rows of a batch).

    Parameters
    ----------
    A : LinearOperator
    t : float
        Nonnegative, finite time.
    x : ndarray, shape (d,) or (n, d)

    Returns
    -------
    ndarray with the shape of ``x``.
    """
    if not np.isfinite(t) or t < 0:
        raise InputError(f"time must be finite and >= 0, got {t}")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != A.dim:
        raise ContractViolation(f"vector dim {x.shape[-1]} != operator dim {A.dim}")
    if not np.all(np.isfinite(x)):
        raise InputError("input vector has non-finite entries")
    if t == 0.0:
        return x.copy()
    E = scipy.linalg.expm(t * A.entries)
    return x @ E.T


def covariance_Qt(A: LinearOperator, Q: CovarianceOperator, t: float,
                  steps: int = 64) -> CovarianceOperator:
    """Covariance of the stochastic convolution over [0, t].

    Evaluates ``integral_0^t e^{sA} Q e^{sA^T} ds`` with a composite
    Gauss-Legendre rule using about ``steps`` integrand evaluations.
    Doubling ``steps`` is the refinement error test.

    Returns
    -------
    CovarianceOperator
        Symmetric PSD by construction (the integrand is).
    """
    if not np.isfinite(t) or t < 0:
        raise InputError(f"time must be finite and >= 0, got {t}")
    if steps < 1:
        raise InputError("steps must be >= 1")
    if A.dim != Q.dim:
        raise ContractViolation(f"operator dim {A.dim} != covariance dim {Q.dim}")
    d = A.dim
    if t == 0.0:
        return CovarianceOperator(np.zeros((d, d)))
    acc = _convolution_covariance(A.entries, Q.entries, t, steps)
    return CovarianceOperator(acc)


def _convolution_covariance(A: np.ndarray, Q: np.ndarray, t: float,
                            steps: int) -> np.ndarray:
    """Raw quadrature of integral_0^t e^{sA} Q e^{sA^T} ds."""
    panels, order = split_rule(steps, t)
    nodes, weights = gauss_legendre_rule(0.0, t, panels, order)
    E = scipy.linalg.expm(nodes[:, None, None] * A)
    acc = np.einsum("s,sij,jk,slk->il", weights, E, Q, E, optimize=True)
    return 0.5 * (acc + acc.T)


def gaussian_sample(C: CovarianceOperator, n: int, seed: int,
                    stream: int = 0) -> np.ndarray:
    """Draw ``n`` i.i.d. samples from N(0, C).

    Sampling goes through the symmetric eigendecomposition with negative
    eigenvalues clamped to zero (clamping already enforced by the
    covariance type).  Identical ``(seed, stream)`` give bit-identical
    output.

    Returns
    -------
    ndarray, shape (n, d)
    """
    if n < 1:
        raise InputError("need n >= 1 samples")
    gen = make_generator(seed, stream)
    z = gen.standard_normal((n, C.dim))
    return z @ C.sampling_matrix().T


def operator_norm(M: np.ndarray) -> float:
    """Spectral norm (largest singular value)."""
    return float(np.linalg.norm(M, 2))


def log_norm(M: np.ndarray) -> float:
    """Logarithmic norm: max eigenvalue of (M + M^T)/2.

    Gives the always-valid growth bound ||e^{tM}|| <= e^{log_norm(M) t}.
    """
    sym = 0.5 * (np.asarray(M, dtype=float) + np.asarray(M, dtype=float).T)
    return float(np.linalg.eigvalsh(sym)[-1])


def flow_covariance_table(A: LinearOperator, Q: CovarianceOperator,
                          times: np.ndarray, gap_steps: int = 16
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Tables of e^{tA} and C(t) over an ascending time grid.

    The covariance is accumulated over the gaps,
    ``C(t_{k+1}) = C(t_k) + e^{t_k A} C(gap) e^{t_k A^T}``, which is exact
    integral additivity; each gap integral is a Gauss-Legendre rule of
    about ``gap_steps`` points.

    Returns
    -------
    (flows, covs) : arrays of shape (len(times), d, d) aligned with
        ``times``.
    """
    times = np.asarray(times, dtype=float)
    d = A.dim
    if times.size == 0:
        return np.empty((0, d, d)), np.empty((0, d, d))
    if times[0] < 0 or np.any(np.diff(times) < 0):
        raise InputError("times must be ascending and nonnegative")
    gaps = np.diff(np.concatenate(([0.0], times)))
    nodes_per_gap, weights_per_gap = [], []
    for gap in gaps:
        if gap > 0:
            # narrow gaps need few Gauss points for full precision
            if gap <= 0.13:
                panels, order = 1, min(4, gap_steps)
            elif gap <= 0.55:
                panels, order = 1, min(8, gap_steps)
            else:
                panels, order = split_rule(gap_steps, gap)
            nodes, weights = gauss_legendre_rule(0.0, gap, panels, order)
        else:
            nodes = weights = np.empty(0)
        nodes_per_gap.append(nodes)
        weights_per_gap.append(weights)
    offsets = np.cumsum([0] + [n.size for n in nodes_per_gap])
    stacked = np.concatenate(nodes_per_gap + [np.concatenate(([0.0], times))])
    mats = scipy.linalg.expm(stacked[:, None, None] * A.entries)
    n_quad = offsets[-1]
    E_nodes = mats[:n_quad]
    flows = mats[n_quad + 1:]
    prev_flows = mats[n_quad:-1]  # e^{t_{k-1} A} with t_{-1} = 0
    # weighted integrand w * e^{uA} Q e^{uA^T} at every node, then per-gap sums
    w_all = np.concatenate(weights_per_gap) if n_quad else np.empty(0)
    P = (w_all[:, None, None] * (E_nodes @ Q.entries)) @ np.swapaxes(E_nodes, 1, 2)
    covs = np.empty((times.size, d, d))
    C = np.zeros((d, d))
    for k in range(times.size):
        lo, hi = offsets[k], offsets[k + 1]
        if hi > lo:
            C_gap = P[lo:hi].sum(axis=0)
            E_prev = prev_flows[k]
            C = C + E_prev @ C_gap @ E_prev.T
            C = 0.5 * (C + C.T)
        covs[k] = C
    return flows, covs
