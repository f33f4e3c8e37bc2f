"""The exact linear (Ornstein-Uhlenbeck) semigroup.

For the drift-free model the time-t law started at x is Gaussian with
mean ``e^{tA} x`` and covariance ``C(t)``, so the semigroup acts by a
Gaussian integral.  Three evaluation routes live here:

* closed form on cylindrical exponentials,
  ``exp(i <e^{tA} x, h> - <C(t) h, h> / 2)``;
* Monte Carlo over exact Gaussian draws, with a standard-error estimate;
* deterministic tensor Gauss-Hermite quadrature for up to three active
  noise dimensions.

The flow-integral functions are stable under the semigroup: applying it
shifts the integration window, which gives them a two-term closed form as
well.  The dedicated check below certifies that identity against the
quadrature route.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError
from .model import GalerkinModel
from .operators import covariance_Qt, expm_apply, gaussian_sample
from .quadrature import gauss_hermite_points
from .testfunctions import (
    Constant,
    CylindricalExp,
    LinearCombination,
    OUIntegralFunction,
)

__all__ = [
    "ou_exact_cyl",
    "ou_apply",
    "ou_apply_gh",
    "ou_exact_apply",
    "ou_shift_identity_check",
    "gaussian_quadrature_mean",
]


def _require_nonnegative_time(t):
    if not np.isfinite(t) or t < 0:
        raise InputError(f"time must be finite and >= 0, got {t}")


def ou_exact_cyl(model: GalerkinModel, t: float, h, x, steps: int = 64) -> complex:
    """Closed-form action on ``exp(i <., h>)`` at the point x.

    Returns the complex value; real and imaginary parts are the actions
    on the cosine and sine components.
    """
    _require_nonnegative_time(t)
    h = np.asarray(h, dtype=float)
    x = np.asarray(x, dtype=float)
    mean = expm_apply(model.A, t, x)
    qt = covariance_Qt(model.A, model.Q, t, steps=steps)
    exponent = 1j * float(mean @ h) - 0.5 * float(h @ (qt.entries @ h))
    return complex(np.exp(exponent))


def ou_apply(model: GalerkinModel, t: float, phi, x, n_samples: int,
             seed: int, stream: int = 0) -> tuple[float, float]:
    """Monte Carlo Gaussian-integral estimate of the semigroup action.

    Returns
    -------
    (value, stderr) : the sample mean of ``phi`` over the exact time-t
        Gaussian law and its standard error.  Deterministic given
        ``(seed, stream)``.
    """
    _require_nonnegative_time(t)
    if n_samples < 2:
        raise InputError("need at least 2 samples for a standard error")
    x = np.asarray(x, dtype=float)
    if t == 0.0:
        return phi.value(model, x), 0.0
    mean = expm_apply(model.A, t, x)
    qt = covariance_Qt(model.A, model.Q, t)
    y = gaussian_sample(qt, n_samples, seed, stream)
    vals = phi.value_batch(model, mean[None, :] + y)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_samples))


def gaussian_quadrature_mean(model, mean, cov, batch_fn,
                             nodes_per_axis: int = 32,
                             tol: float | None = None,
                             max_axis_nodes: int = 128):
    """Deterministic expectation of ``batch_fn`` under N(mean, cov).

    ``batch_fn`` maps an (n, d) batch to (n,) values (complex allowed).
    With ``tol`` set, the per-axis node count doubles until the value is
    stable.  Limited to three active noise dimensions.
    """
    cov = np.asarray(cov, dtype=float)
    evals = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    active = int(np.sum(evals > 1e-13 * max(evals.max(initial=0.0), 1.0)))
    if active > 3:
        raise InputError(
            f"tensor quadrature limited to 3 active dimensions, got {active}")

    def estimate(nodes):
        pts, wts = gauss_hermite_points(cov, nodes)
        vals = batch_fn(np.asarray(mean)[None, :] + pts)
        return np.sum(wts * vals)

    value = estimate(nodes_per_axis)
    if tol is None:
        return value
    nodes = nodes_per_axis
    while nodes < max_axis_nodes:
        nodes *= 2
        refined = estimate(nodes)
        if abs(refined - value) < tol:
            return refined
        value = refined
    return value


def ou_apply_gh(model: GalerkinModel, t: float, phi, x,
                nodes_per_axis: int = 32, tol: float | None = None) -> float:
    """Deterministic Gauss-Hermite evaluation of the semigroup action."""
    _require_nonnegative_time(t)
    x = np.asarray(x, dtype=float)
    if t == 0.0:
        return phi.value(model, x)
    mean = expm_apply(model.A, t, x)
    qt = covariance_Qt(model.A, model.Q, t)
    val = gaussian_quadrature_mean(model, mean, qt.entries,
                                   lambda pts: phi.value_batch(model, pts),
                                   nodes_per_axis, tol)
    return float(np.real(val))


def ou_exact_apply(model: GalerkinModel, t: float, phi, x) -> float:
    """Deterministic semigroup action, closed form where available.

    Cylindrical exponentials use the Gaussian characteristic function;
    flow-integral functions use their window-shift form; constants are
    fixed; linear combinations follow by linearity.  Anything else falls
    back to tensor quadrature (needs at most 3 active dimensions).
    """
    _require_nonnegative_time(t)
    x = np.asarray(x, dtype=float)
    if t == 0.0:
        return phi.value(model, x)
    if isinstance(phi, Constant):
        return float(phi.c)
    if isinstance(phi, CylindricalExp):
        z = ou_exact_cyl(model, t, phi.h, x)
        return z.real if phi.part == "re" else z.imag
    if isinstance(phi, OUIntegralFunction):
        scale = max(1, int(np.ceil((phi.a + t) / phi.a)))
        wide = OUIntegralFunction(phi.a + t, phi.h, phi.part, phi.nodes * scale)
        head = OUIntegralFunction(t, phi.h, phi.part, phi.nodes)
        return wide.value(model, x) - head.value(model, x)
    if isinstance(phi, LinearCombination):
        return sum(c * ou_exact_apply(model, t, term, x)
                   for c, term in zip(phi.coefficients, phi.terms))
    return ou_apply_gh(model, t, phi, x, tol=1e-11)


def ou_shift_identity_check(model: GalerkinModel, t: float, a: float, h, x,
                            nodes_per_axis: int = 32) -> float:
    """Residual of the window-shift identity for flow-integral functions.

    The left side applies the semigroup by deterministic Gaussian
    quadrature of the integral function itself (node-doubling converged);
    the right side is the difference of the shifted-window evaluations.
    Returns the modulus of the complex residual, which covers both parts.
    """
    if t <= 0 or a <= 0:
        raise InputError("need t > 0 and a > 0")
    h = np.asarray(h, dtype=float)
    x = np.asarray(x, dtype=float)
    inner = 96
    base = OUIntegralFunction(a, h, "re", nodes=inner)
    mean = expm_apply(model.A, t, x)
    qt = covariance_Qt(model.A, model.Q, t)

    # outer Gaussian rule: double per-axis nodes until stable
    pts_nodes = nodes_per_axis
    lhs_prev = None
    while True:
        pts, wts = gauss_hermite_points(qt.entries, pts_nodes)
        lhs = np.sum(wts * base.complex_batch(model, mean[None, :] + pts))
        if lhs_prev is not None and abs(lhs - lhs_prev) < 1e-11:
            break
        if pts_nodes >= 4 * nodes_per_axis:
            break
        lhs_prev = lhs
        pts_nodes *= 2
    # inner window rule: one refinement at the converged outer rule
    lhs_fine = np.sum(wts * base.complex_batch(model, mean[None, :] + pts,
                                               nodes=2 * inner))
    if abs(lhs_fine - lhs) > 1e-11:
        lhs = lhs_fine

    def window(upper):
        m = max(inner, int(np.ceil(inner * upper / a)))
        f = OUIntegralFunction(upper, h, "re", nodes=m)
        X = x[None, :]
        v1 = f.complex_batch(model, X)[0]
        v2 = f.complex_batch(model, X, nodes=2 * m)[0]
        return v2 if abs(v2 - v1) > 1e-12 else v1

    rhs = window(a + t) - window(t)
    return float(abs(lhs - rhs))
