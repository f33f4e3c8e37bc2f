"""Measures, their evolution under the dual semigroup, and the identity
checks built on them.

A measure is a weighted particle ensemble (signed weights allowed; the
l1 weight norm is the total-variation proxy).  The dual semigroup acts by
pushing every particle through the transition kernel.  The central check
integrates the second-order operator along an evolved trajectory and
compares with the increment of the test-function moment: for a solution
of the measure equation the two agree up to Monte Carlo and trapezoid
error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, InputError
from .model import GalerkinModel
from .operators import flow_covariance_table, gaussian_sample
from .rng import make_generator, substream
from .sde import SemigroupHandle, advance_states, transition_apply
from .testfunctions import (
    Constant,
    CylindricalExp,
    LinearCombination,
    OUIntegralFunction,
    kolmogorov_batch,
)

__all__ = [
    "ParticleMeasure",
    "MeasureTrajectory",
    "ResidualTable",
    "dual_pushforward",
    "duality_check",
    "evolve_measure",
    "measure_equation_residual",
    "measure_equation_stream",
    "resolvent_apply",
    "ResolventFunction",
    "backward_solution",
    "bernstein_approx",
    "cesaro_smooth",
    "semigroup_curve",
]


# ---------------------------------------------------------------------------
# particle measures


@dataclass(frozen=True)
class ParticleMeasure:
    """Weighted particle ensemble; weights may be signed."""

    positions: np.ndarray  # (n, d)
    weights: np.ndarray    # (n,)
    label: str = ""

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if p.ndim != 2 or w.ndim != 1 or p.shape[0] != w.shape[0]:
            raise ContractViolation(
                f"positions {p.shape} and weights {w.shape} do not align")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(w))):
            raise InputError("non-finite particle data")
        p.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def total_variation(self) -> float:
        """l1 norm of the weights, an upper bound for the true TV norm."""
        return float(np.sum(np.abs(self.weights)))

    @property
    def is_probability(self) -> bool:
        return bool(np.all(self.weights >= 0)
                    and abs(self.weights.sum() - 1.0) <= 1e-12)

    def integrate(self, phi, model: GalerkinModel) -> float:
        return float(self.weights @ phi.value_batch(model, self.positions))

    @classmethod
    def dirac(cls, x, label: str = "dirac") -> "ParticleMeasure":
        x = np.asarray(x, dtype=float)
        return cls(x[None, :], np.ones(1), label)

    @classmethod
    def gaussian(cls, cov, n: int, seed: int, stream: int = 0,
                 mean=None, label: str = "gaussian") -> "ParticleMeasure":
        pts = gaussian_sample(cov, n, seed, stream)
        if mean is not None:
            pts = pts + np.asarray(mean, dtype=float)[None, :]
        return cls(pts, np.full(n, 1.0 / n), label)


@dataclass(frozen=True)
class MeasureTrajectory:
    """Snapshots of an evolving measure over a strictly increasing grid
    starting at 0."""

    times: np.ndarray
    snapshots: tuple
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.size < 1 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ContractViolation("grid must start at 0 and increase strictly")
        snaps = tuple(self.snapshots)
        if len(snaps) != t.size:
            raise ContractViolation("one snapshot per grid time required")
        dims = {s.dim for s in snaps}
        if len(dims) != 1:
            raise ContractViolation(f"snapshot dimensions differ: {dims}")
        t.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "snapshots", snaps)


# ---------------------------------------------------------------------------
# dual semigroup action


def dual_pushforward(handle: SemigroupHandle, mu: ParticleMeasure, t: float,
                     samples_per_particle: int = 1, seed: int | None = None,
                     stream: int = 0) -> ParticleMeasure:
    """Push the measure forward: every particle spawns endpoint children.

    Each of the ``samples_per_particle`` children carries weight
    ``w_i / samples_per_particle``; children of particle i occupy the
    contiguous block ``i*spp:(i+1)*spp`` of the result.
    """
    if t < 0 or not np.isfinite(t):
        raise InputError(f"time must be finite and >= 0, got {t}")
    if samples_per_particle < 1:
        raise InputError("need >= 1 samples per particle")
    spp = samples_per_particle
    starts = np.repeat(mu.positions, spp, axis=0)
    gen = make_generator(handle.seed if seed is None else seed, stream)
    ends = advance_states(handle, starts, t, gen, {})
    weights = np.repeat(mu.weights / spp, spp)
    return ParticleMeasure(ends, weights, label=f"{mu.label}+t{t:g}")


def duality_check(handle: SemigroupHandle, phi, mu: ParticleMeasure, t: float,
                  samples_per_particle: int = 64, seed: int = 0,
                  shared: bool = True) -> tuple[float, float]:
    """Residual of the pairing identity between the two semigroup actions.

    With ``shared=True`` the pushforward samples are reused to integrate
    ``phi``, so the two sides are the same sum reordered and the residual
    is floating-point small.  With independent seeds the residual is a
    Monte Carlo quantity; the returned stderr combines both sides.
    """
    model = handle.model
    spp = samples_per_particle
    nu = dual_pushforward(handle, mu, t, spp, seed=seed, stream=0)
    lhs_vals = phi.value_batch(model, nu.positions)
    lhs = float(nu.weights @ lhs_vals)
    blocks = lhs_vals.reshape(mu.size, spp)
    block_var = blocks.var(axis=1, ddof=1) if spp > 1 else np.zeros(mu.size)
    se_lhs = math.sqrt(float(np.sum((mu.weights ** 2) * block_var / spp)))
    if shared:
        rhs = float(mu.weights @ blocks.mean(axis=1))
        return abs(lhs - rhs), 0.0
    nu2 = dual_pushforward(handle, mu, t, spp, seed=seed, stream=1)
    vals2 = phi.value_batch(model, nu2.positions).reshape(mu.size, spp)
    rhs = float(mu.weights @ vals2.mean(axis=1))
    var2 = vals2.var(axis=1, ddof=1) if spp > 1 else np.zeros(mu.size)
    se_rhs = math.sqrt(float(np.sum((mu.weights ** 2) * var2 / spp)))
    return abs(lhs - rhs), math.hypot(se_lhs, se_rhs)


def evolve_measure(handle: SemigroupHandle, mu0: ParticleMeasure, times,
                   seed: int = 0, stream: int = 0,
                   expand_to: int | None = None) -> MeasureTrajectory:
    """Evolve a measure along a grid, snapshotting at every grid time.

    ``expand_to`` spawns children on the first transition so small
    initial ensembles (for example a point mass) reach a target particle
    count; afterwards each particle follows a single path.
    """
    times = np.asarray(times, dtype=float)
    if times.size < 1 or times[0] != 0.0:
        raise InputError("grid must start at 0")
    snaps = [mu0]
    X = mu0.positions
    w = mu0.weights
    if expand_to is not None and expand_to > mu0.size:
        spp = int(np.ceil(expand_to / mu0.size))
        X = np.repeat(X, spp, axis=0)
        w = np.repeat(w / spp, spp)
    gen = make_generator(seed, stream)
    kernels: dict = {}
    prev = 0.0
    for t in times[1:]:
        X = advance_states(handle, X, t - prev, gen, kernels)
        snaps.append(ParticleMeasure(X, w, label=f"{mu0.label}+t{t:g}"))
        prev = t
    provenance = {"handle": handle.describe(), "seed": seed, "stream": stream,
                  "expand_to": expand_to}
    return MeasureTrajectory(times, tuple(snaps), provenance)


# ---------------------------------------------------------------------------
# the measure-equation residual


@dataclass
class ResidualTable:
    """Per-function, per-time residual of the weak evolution identity."""

    times: np.ndarray              # (K,)
    labels: list                   # (F,)
    moments: np.ndarray            # (F, K)   integral of phi
    generator_moments: np.ndarray  # (F, K)   integral of the operator
    generator_stderr: np.ndarray   # (F, K)
    residuals: np.ndarray          # (F, K)

    def max_residual(self) -> float:
        return float(self.residuals.max())

    def median_residual(self) -> float:
        return float(np.median(self.residuals[:, 1:])) if self.times.size > 1 \
            else 0.0


def _function_label(phi, index: int) -> str:
    if isinstance(phi, OUIntegralFunction):
        return f"flow-integral[a={phi.a:g},{phi.part}]#{index}"
    if isinstance(phi, CylindricalExp):
        return f"cylindrical[{phi.part}]#{index}"
    return f"{type(phi).__name__.lower()}#{index}"


@dataclass(frozen=True)
class _BankTable:
    """Stacked frequency table for a bank of exponential-content functions.

    Every flow-integral node and every cylindrical frequency contributes
    one column; the weighted empirical characteristic sums over a
    particle cloud then serve all bank members from a single
    trigonometric pass.  The per-column generator action on
    ``exp(i<x, v>)`` is exact, so node resolution affects only which
    member of the exponential span is being certified, never the
    residual identity itself.
    """

    V: np.ndarray        # (M, d) frequency rows
    amp: np.ndarray      # (M,) real coefficients
    c: np.ndarray        # (M,) <Q v, v> per column
    members: list        # (bank index, part, lo, hi) column slices
    generic: list        # bank indices handled by the fallback routines


_BANK_TABLE_CACHE: dict = {}


def _member_key(phi):
    if isinstance(phi, OUIntegralFunction):
        return ("flow", float(phi.a), phi.h.tobytes(), phi.part, phi.nodes)
    if isinstance(phi, CylindricalExp):
        return ("cyl", phi.h.tobytes(), phi.part)
    return ("generic", id(phi))


def _bank_table(model: GalerkinModel, bank) -> _BankTable:
    key = (model.token, tuple(_member_key(phi) for phi in bank))
    hit = _BANK_TABLE_CACHE.get(key)
    if hit is not None:
        return hit
    from .testfunctions import _node_table
    rows, amps, members, generic = [], [], [], []
    slices: dict = {}  # shared columns for members differing only in part
    lo = 0
    for idx, phi in enumerate(bank):
        if isinstance(phi, OUIntegralFunction):
            col_key = ("flow", float(phi.a), phi.h.tobytes(), phi.nodes)
        elif isinstance(phi, CylindricalExp):
            col_key = ("cyl", phi.h.tobytes())
        else:
            generic.append(idx)
            continue
        span = slices.get(col_key)
        if span is None:
            if col_key[0] == "flow":
                t = _node_table(model, phi.a, phi.h, phi.nodes)
                rows.append(t.V)
                amps.append(t.w * np.exp(-0.5 * t.q))
                hi = lo + t.V.shape[0]
            else:
                rows.append(phi.h[None, :])
                amps.append(np.ones(1))
                hi = lo + 1
            span = (lo, hi)
            slices[col_key] = span
            lo = hi
        members.append((idx, phi.part, span[0], span[1]))
    if rows:
        V = np.concatenate(rows, axis=0)
        amp = np.concatenate(amps)
    else:
        V = np.zeros((0, model.dim))
        amp = np.zeros(0)
    c = np.einsum("md,de,me->m", V, model.Q.entries, V) if V.size else np.zeros(0)
    table = _BankTable(V, amp, c, members, generic)
    if len(_BANK_TABLE_CACHE) > 64:
        _BANK_TABLE_CACHE.clear()
    _BANK_TABLE_CACHE[key] = table
    return table


def _bank_moments(model, bank, X, w, want_stderr: bool = True,
                  chunk: int = 65536):
    """Weighted moments of every bank function and of its operator image.

    Returns (m, g, g_se) arrays of length len(bank); ``g_se`` is zero
    unless ``want_stderr``.  One cos/sin pass over (particles x columns)
    serves the whole bank; the operator moments reduce through the
    weighted characteristic sums, so only the stderr path touches
    per-particle operator values.
    """
    F = len(bank)
    m = np.zeros(F)
    g = np.zeros(F)
    g_se = np.zeros(F)
    table = _bank_table(model, bank)
    for idx in table.generic:
        vals = bank[idx].value_batch(model, X)
        kvals = kolmogorov_batch(bank[idx], model, X)
        m[idx] = w @ vals
        g[idx] = w @ kvals
        if want_stderr:
            g_se[idx] = float(np.sqrt(np.sum((w ** 2) * (kvals - g[idx]) ** 2)))
    M = table.V.shape[0]
    if M == 0:
        return m, g, g_se
    n, d = X.shape
    Sw = np.zeros(M, dtype=complex)       # sum_i w_i exp(i<x_i, v>)
    D = np.zeros((d, M), dtype=complex)   # sum_i w_i G_i exp(i<x_i, v>)
    k1 = np.zeros(F)                      # sum w^2 k_i   (stderr only)
    k2 = np.zeros(F)                      # sum w^2 k_i^2
    w2 = 0.0
    use_drift = not model.drift.is_zero
    rows = min(chunk, n)
    theta = np.empty((rows, M))
    Cb = np.empty((rows, M))
    Sb = np.empty((rows, M))
    for beg in range(0, n, chunk):
        end = min(beg + chunk, n)
        Xc, wc = X[beg:end], w[beg:end]
        m_rows = end - beg
        th = theta[:m_rows]
        np.dot(Xc, table.V.T, out=th)
        Cc = np.cos(th, out=Cb[:m_rows])
        Sc = np.sin(th, out=Sb[:m_rows])
        Sw += (wc @ Cc) + 1j * (wc @ Sc)
        G = Xc @ model.A.entries.T
        if use_drift:
            G = G + model.drift(Xc)
        WG = G * wc[:, None]
        D += (WG.T @ Cc) + 1j * (WG.T @ Sc)
        if want_stderr:
            B = G @ table.V.T
            w2 += float(np.sum(wc ** 2))
            for idx, part, lo, hi in table.members:
                a_s, c_s = table.amp[lo:hi], table.c[lo:hi]
                if part == "re":
                    kv = (-B[:, lo:hi] * Sc[:, lo:hi]
                          - 0.5 * c_s * Cc[:, lo:hi]) @ a_s
                else:
                    kv = (B[:, lo:hi] * Cc[:, lo:hi]
                          - 0.5 * c_s * Sc[:, lo:hi]) @ a_s
                k1[idx] += np.sum((wc ** 2) * kv)
                k2[idx] += np.sum((wc ** 2) * kv ** 2)
    for idx, part, lo, hi in table.members:
        a_s, c_s = table.amp[lo:hi], table.c[lo:hi]
        m_c = a_s @ Sw[lo:hi]
        dots = np.sum(table.V[lo:hi] * D[:, lo:hi].T, axis=1)
        g_c = a_s @ (1j * dots - 0.5 * c_s * Sw[lo:hi])
        m[idx] = m_c.real if part == "re" else m_c.imag
        g[idx] = g_c.real if part == "re" else g_c.imag
        if want_stderr:
            var = k2[idx] - 2.0 * g[idx] * k1[idx] + g[idx] ** 2 * w2
            g_se[idx] = float(np.sqrt(max(var, 0.0)))
    return m, g, g_se


def _assemble_table(times, bank, m, g, g_se) -> ResidualTable:
    gaps = np.diff(times)
    increments = 0.5 * gaps[None, :] * (g[:, 1:] + g[:, :-1])
    integral = np.concatenate(
        [np.zeros((len(bank), 1)), np.cumsum(increments, axis=1)], axis=1)
    residuals = np.abs(m - m[:, :1] - integral)
    labels = [_function_label(phi, i) for i, phi in enumerate(bank)]
    return ResidualTable(times, labels, m, g, g_se, residuals)


def measure_equation_residual(trajectory: MeasureTrajectory, bank,
                              model: GalerkinModel,
                              want_stderr: bool = True) -> ResidualTable:
    """Check the weak evolution identity along a stored trajectory.

    For each bank function the moment increment ``m(t_k) - m(0)`` is
    compared with the trapezoid integral of the operator moment
    ``g(s) = integral of the second-order operator against mu_s``.
    """
    if trajectory.times.size < 2:
        raise InputError("need at least two grid times")
    K = trajectory.times.size
    F = len(bank)
    m = np.empty((F, K))
    g = np.empty((F, K))
    g_se = np.empty((F, K))
    for k, snap in enumerate(trajectory.snapshots):
        m[:, k], g[:, k], g_se[:, k] = _bank_moments(
            model, bank, snap.positions, snap.weights, want_stderr)
    return _assemble_table(trajectory.times, bank, m, g, g_se)


def measure_equation_stream(handle: SemigroupHandle, mu0: ParticleMeasure,
                            times, bank, seed: int = 0, stream: int = 0,
                            expand_to: int | None = None,
                            want_stderr: bool = True) -> ResidualTable:
    """Streaming variant of the residual check: evolves the ensemble in
    place and accumulates moments without storing snapshots."""
    times = np.asarray(times, dtype=float)
    if times.size < 2 or times[0] != 0.0:
        raise InputError("need a grid starting at 0 with >= 2 times")
    model = handle.model
    X = mu0.positions
    w = mu0.weights
    if expand_to is not None and expand_to > mu0.size:
        spp = int(np.ceil(expand_to / mu0.size))
        X = np.repeat(X, spp, axis=0)
        w = np.repeat(w / spp, spp)
    gen = make_generator(seed, stream)
    kernels: dict = {}
    K = times.size
    F = len(bank)
    m = np.empty((F, K))
    g = np.empty((F, K))
    g_se = np.empty((F, K))
    prev = 0.0
    for k, t in enumerate(times):
        X = advance_states(handle, X, t - prev, gen, kernels)
        m[:, k], g[:, k], g_se[:, k] = _bank_moments(model, bank, X, w,
                                                     want_stderr)
        prev = t
    return _assemble_table(times, bank, m, g, g_se)


# ---------------------------------------------------------------------------
# semigroup time-curves, resolvent, backward solution


def semigroup_curve(handle: SemigroupHandle, f, x, ts, stream: int = 0
                    ) -> np.ndarray:
    """Values of the semigroup action at each time in ``ts``.

    Exact handles evaluate cylindrical content through the flow tables in
    one vectorised pass; other functions and Monte Carlo handles fall
    back to per-time evaluation.
    """
    ts = np.asarray(ts, dtype=float)
    order = np.argsort(ts, kind="stable")
    sorted_ts = ts[order]
    out = np.empty(ts.size)
    if handle.deterministic and _cylindrical_content_only(f):
        out[order] = _exact_cyl_curve(handle.model, f, np.asarray(x, float),
                                      sorted_ts)
        return out
    for pos, t in zip(order, sorted_ts):
        out[pos] = transition_apply(handle, f, t, x,
                                    stream=substream(stream, pos))[0]
    return out


def _cylindrical_content_only(f) -> bool:
    if isinstance(f, (CylindricalExp, Constant)):
        return True
    if isinstance(f, LinearCombination):
        return all(_cylindrical_content_only(t) for t in f.terms)
    return False


def _exact_cyl_curve(model, f, x, sorted_ts):
    if isinstance(f, Constant):
        return np.full(sorted_ts.size, float(f.c))
    if isinstance(f, LinearCombination):
        out = np.zeros(sorted_ts.size)
        for c, term in zip(f.coefficients, f.terms):
            out += c * _exact_cyl_curve(model, term, x, sorted_ts)
        return out
    flows, covs = flow_covariance_table(model.A, model.Q, sorted_ts)
    h = f.h
    V = np.einsum("mij,i->mj", flows, h)   # rows e^{tA^T} h
    q = np.einsum("mij,i,j->m", covs, h, h)
    z = np.exp(1j * (V @ x) - 0.5 * q)
    return z.real if f.part == "re" else z.imag


def _decay_rate(handle: SemigroupHandle) -> float:
    model = handle.model
    return max(0.0, model.growth_rate
               + model.growth_const * model.drift.lipschitz)


def resolvent_apply(handle: SemigroupHandle, lam: float, f, x,
                    tol: float = 1e-8, t_max: float | None = None,
                    order: int = 12, stream: int = 0) -> tuple[float, float]:
    """Laplace-transform evaluation of the resolvent at ``lam``.

    Integrates ``e^{-lam t} P_t f(x)`` by composite Gauss-Legendre over
    [0, T] with T chosen so the contraction tail bound
    ``e^{-lam T} ||f|| / lam`` is below ``tol``; the bound is returned
    alongside the value.
    """
    rate = _decay_rate(handle)
    if not lam > rate:
        raise InputError(
            f"resolvent needs lambda > max(0, growth+drift) = {rate:.4g}, "
            f"got {lam}")
    bound = f.sup_bound()
    if bound == 0.0:
        return 0.0, 0.0
    if t_max is None:
        t_max = math.log(bound / (0.9 * tol * lam)) / lam
        t_max = max(t_max, 1e-6)
    panels = max(4, int(math.ceil(t_max / min(0.5, 2.0 / lam))))
    from .quadrature import gauss_legendre_rule
    nodes, weights = gauss_legendre_rule(0.0, t_max, panels, order)
    curve = semigroup_curve(handle, f, x, nodes, stream=stream)
    value = float(np.sum(weights * np.exp(-lam * nodes) * curve))
    tail = math.exp(-lam * t_max) * bound / lam
    return value, tail


class ResolventFunction:
    """The resolvent applied to a function, exposed as a function itself.

    Supports batched evaluation so the quadrature and difference-quotient
    machinery can treat it like any other test function.
    """

    def __init__(self, handle: SemigroupHandle, lam: float, f,
                 tol: float = 1e-8):
        rate = _decay_rate(handle)
        if not lam > rate:
            raise InputError(f"need lambda > {rate:.4g}")
        self.handle = handle
        self.lam = lam
        self.f = f
        self.tol = tol
        bound = f.sup_bound()
        self._bound = bound / lam + tol
        self._t_max = (math.log(bound / (0.9 * tol * lam)) / lam
                       if bound > 0 else 1e-6)
        panels = max(4, int(math.ceil(self._t_max / min(0.5, 2.0 / lam))))
        from .quadrature import gauss_legendre_rule
        self._nodes, self._weights = gauss_legendre_rule(
            0.0, self._t_max, panels, 12)
        self._fast = handle.deterministic and _cylindrical_content_only(f)
        if self._fast:
            self._tables = self._build_tables()

    def _build_tables(self):
        model = self.handle.model
        flows, covs = flow_covariance_table(model.A, model.Q, self._nodes)
        terms = []

        def collect(f, coef):
            if isinstance(f, Constant):
                terms.append((coef * float(f.c), None, None, None))
            elif isinstance(f, CylindricalExp):
                V = np.einsum("mij,i->mj", flows, f.h)
                q = np.einsum("mij,i,j->m", covs, f.h, f.h)
                terms.append((coef, V, q, f.part))
            else:
                for c, t in zip(f.coefficients, f.terms):
                    collect(t, coef * c)

        collect(self.f, 1.0)
        return terms

    def value_batch(self, model, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        wl = self._weights * np.exp(-self.lam * self._nodes)
        if self._fast:
            out = np.zeros(X.shape[0])
            for coef, V, q, part in self._tables:
                if V is None:
                    out += coef * float(np.sum(wl))
                    continue
                theta = X @ V.T
                amp = wl * np.exp(-0.5 * q)
                vals = (np.cos(theta) @ amp if part == "re"
                        else np.sin(theta) @ amp)
                out += coef * vals
            return out
        return np.array([
            resolvent_apply(self.handle, self.lam, self.f, row,
                            tol=self.tol, t_max=self._t_max)[0]
            for row in X])

    def value(self, model, x):
        return float(self.value_batch(model, np.asarray(x, float)[None, :])[0])

    def sup_bound(self):
        return self._bound


def backward_solution(handle: SemigroupHandle, phi, T: float, t: float, x,
                      order: int = 12, stream: int = 0) -> float:
    """Value ``u(t, x) = -integral_0^{T-t} P_s phi(x) ds``.

    Satisfies ``u(T, .) = 0`` and the time-Lipschitz bound with constant
    ``sup |phi|``.
    """
    if not 0 <= t <= T:
        raise InputError(f"need 0 <= t <= T, got t={t}, T={T}")
    length = T - t
    if length == 0.0:
        return 0.0
    from .quadrature import gauss_legendre_rule
    panels = max(2, int(math.ceil(length / 0.25)))
    nodes, weights = gauss_legendre_rule(0.0, length, panels, order)
    curve = semigroup_curve(handle, phi, x, nodes, stream=stream)
    return float(-np.sum(weights * curve))


def backward_solution_batch(handle: SemigroupHandle, phi, T: float, t: float,
                            X, order: int = 12) -> np.ndarray:
    """Vectorised backward solution over rows of X (exact handles with
    cylindrical content only)."""
    if not 0 <= t <= T:
        raise InputError(f"need 0 <= t <= T, got t={t}, T={T}")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    length = T - t
    if length == 0.0:
        return np.zeros(X.shape[0])
    if not (handle.deterministic and _cylindrical_content_only(phi)):
        return np.array([backward_solution(handle, phi, T, t, row, order)
                         for row in X])
    from .quadrature import gauss_legendre_rule
    panels = max(2, int(math.ceil(length / 0.25)))
    nodes, weights = gauss_legendre_rule(0.0, length, panels, order)
    model = handle.model
    flows, covs = flow_covariance_table(model.A, model.Q, nodes)
    out = np.zeros(X.shape[0])

    def accumulate(f, coef):
        nonlocal out
        if isinstance(f, Constant):
            out += -coef * float(f.c) * float(np.sum(weights))
        elif isinstance(f, CylindricalExp):
            V = np.einsum("mij,i->mj", flows, f.h)
            q = np.einsum("mij,i,j->m", covs, f.h, f.h)
            theta = X @ V.T
            amp = weights * np.exp(-0.5 * q)
            vals = np.cos(theta) @ amp if f.part == "re" else np.sin(theta) @ amp
            out += -coef * vals
        else:
            for c, term in zip(f.coefficients, f.terms):
                accumulate(term, coef * c)

    accumulate(phi, 1.0)
    return out


# ---------------------------------------------------------------------------
# approximation utilities


def bernstein_approx(g, n: int, t: float) -> float:
    """Bernstein polynomial approximation of ``g`` on [0, 1] at ``t``.

    The binomial weights are evaluated in log space for stability at
    large n.
    """
    if n < 1:
        raise InputError("need n >= 1")
    if not 0.0 <= t <= 1.0:
        raise InputError(f"t must lie in [0, 1], got {t}")
    if t == 0.0:
        return float(g(0.0))
    if t == 1.0:
        return float(g(1.0))
    k = np.arange(n + 1)
    logw = (math.lgamma(n + 1)
            - np.array([math.lgamma(i + 1) + math.lgamma(n - i + 1) for i in k])
            + k * math.log(t) + (n - k) * math.log1p(-t))
    w = np.exp(logw)
    vals = np.array([g(i / n) for i in k], dtype=float)
    return float(w @ vals)


def cesaro_smooth(handle: SemigroupHandle, phi, n1: int, n3: int, x,
                  stream: int = 0) -> float:
    """Cesaro average of semigroup evaluations on the lattice i/(n1 n3).

    As n3 grows this converges (like 1/n3) to n1 times the time integral
    of the action over [0, 1/n1]; as n1 grows the value approaches
    ``phi(x)``.
    """
    if n1 < 1 or n3 < 1:
        raise InputError("need n1, n3 >= 1")
    ts = np.arange(1, n3 + 1) / (n1 * n3)
    curve = semigroup_curve(handle, phi, x, ts, stream=stream)
    return float(curve.mean())
