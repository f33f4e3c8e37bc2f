"""Monte Carlo transition semigroup for the semilinear equation.

The integrator is an exponential Euler scheme whose noise increments are
exact draws from the per-step convolution covariance:

    X_{k+1} = e^{dt A} X_k + e^{dt A} F(X_k) dt + xi_k,
    xi_k ~ N(0, C(dt)).

The linear part is therefore exact: with F = 0 every marginal is exactly
Gaussian, which anchors all cross-checks against the closed-form
semigroup.  The first-variation (tangent) process runs along the same
path with the same noise, giving pathwise derivative estimates.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import BlowUpError, ContractViolation, InputError
from .model import GalerkinModel
from .operators import covariance_Qt, expm_apply
from . import ou
from .rng import make_generator
from .testfunctions import Constant, CylindricalExp, LinearCombination, OUIntegralFunction

__all__ = [
    "SemigroupHandle",
    "PathState",
    "TrajectoryRecord",
    "exact_ou_handle",
    "mc_handle",
    "simulate_mild",
    "transition_apply",
    "generator_quotient",
    "stochastic_continuity_check",
    "first_variation",
    "gradient_transition",
    "advance_states",
    "path_snapshots",
    "export_trajectory_csv",
    "import_trajectory_csv",
]

BLOWUP_FACTOR = 1e6


@dataclass(frozen=True)
class PathState:
    """Ensemble of sample paths at a single time, with seed provenance."""

    time: float
    positions: np.ndarray  # (n, d)
    seed: int
    stream: int
    steps: int = 0

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=float)
        p.flags.writeable = False
        object.__setattr__(self, "positions", p)


@dataclass(frozen=True)
class TrajectoryRecord:
    """Positions recorded along the step lattice; times nondecreasing."""

    times: np.ndarray      # (K,)
    positions: np.ndarray  # (K, n, d)
    seed: int
    stream: int

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if np.any(np.diff(t) < 0) or (t.size and t[0] < 0):
            raise ContractViolation("trajectory times must be nondecreasing and >= 0")
        p = np.asarray(self.positions, dtype=float)
        t.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", p)


@dataclass(frozen=True)
class SemigroupHandle:
    """Evaluator for the transition semigroup.

    ``method`` is ``"exact-ou"`` (requires a zero drift; deterministic
    evaluation) or ``"mc-sde"`` (exponential Euler Monte Carlo with step
    ``dt`` and ``n_samples`` paths).  ``seed`` roots every stream drawn
    through this handle.
    """

    model: GalerkinModel
    method: str
    dt: float | None = None
    n_samples: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("exact-ou", "mc-sde"):
            raise ContractViolation(f"unknown method {self.method!r}")
        if self.method == "exact-ou" and not self.model.drift.is_zero:
            raise ContractViolation("exact evaluation requires a zero drift")
        if self.method == "mc-sde":
            if self.dt is None or not np.isfinite(self.dt) or self.dt <= 0:
                raise ContractViolation("mc-sde needs dt > 0")
            if self.n_samples < 2:
                raise ContractViolation("mc-sde needs n_samples >= 2")

    @property
    def deterministic(self) -> bool:
        return self.method == "exact-ou"

    def describe(self) -> dict:
        return {"method": self.method, "dt": self.dt,
                "n_samples": self.n_samples, "seed": self.seed,
                "dim": self.model.dim, "drift": self.model.drift.name}


def exact_ou_handle(model: GalerkinModel, seed: int = 0) -> SemigroupHandle:
    return SemigroupHandle(model.without_drift(), "exact-ou", seed=seed)


def mc_handle(model: GalerkinModel, dt: float, n_samples: int,
              seed: int = 0) -> SemigroupHandle:
    return SemigroupHandle(model, "mc-sde", dt=dt, n_samples=n_samples, seed=seed)


# ---------------------------------------------------------------------------
# the integrator


class _StepKernel:
    """Precomputed flow and noise factors for one step size."""

    def __init__(self, model: GalerkinModel, dt: float):
        self.dt = dt
        self.E = scipy.linalg.expm(dt * model.A.entries)
        self.S = covariance_Qt(model.A, model.Q, dt).sampling_matrix()


def _segment_plan(length: float, dt: float) -> list[float]:
    """Split a time interval into full dt steps plus one remainder."""
    if length <= 0:
        return []
    full = int(np.floor(length / dt + 1e-9))
    rem = length - full * dt
    steps = [dt] * full
    if rem > 1e-12 * max(1.0, length):
        steps.append(rem)
    return steps


def _euler_segment(model, X, eta, length, dt, gen, guard, kernels,
                   noise=None, noise_offset=0):
    """Advance an ensemble (and optionally its tangent) over one interval."""
    drift = model.drift
    use_drift = not drift.is_zero
    k = noise_offset
    for h in _segment_plan(length, dt):
        key = round(h, 14)
        kern = kernels.get(key)
        if kern is None:
            kern = _StepKernel(model, h)
            kernels[key] = kern
        if noise is not None:
            xi = noise[k]
            k += 1
        else:
            z = gen.standard_normal(X.shape)
            xi = z @ kern.S.T
        if eta is not None:
            eta = (eta + h * drift.directional(X, eta)) @ kern.E.T
        if use_drift:
            X = (X + h * drift(X)) @ kern.E.T + xi
        else:
            X = X @ kern.E.T + xi
        worst = np.max(np.linalg.norm(X, axis=1), initial=0.0)
        if worst > guard:
            raise BlowUpError(
                f"path norm {worst:.3e} exceeded guard {guard:.3e}",
                max_norm=float(worst))
    return X, eta, k


def simulate_mild(model: GalerkinModel, x, T: float, dt: float, n: int,
                  seed: int, stream: int = 0, return_trajectory: bool = False,
                  noise: np.ndarray | None = None):
    """Simulate ``n`` mild-solution paths to time T.

    Parameters
    ----------
    x : (d,) start point, or (n, d) per-path start points.
    noise : optional (steps, n, d) pre-drawn covariance-shaped increments,
        for common-random-number couplings; T/dt must then be integral.

    Returns
    -------
    PathState, or (PathState, TrajectoryRecord) with
    ``return_trajectory=True``.
    """
    if T < 0 or not np.isfinite(T):
        raise InputError(f"horizon must be finite and >= 0, got {T}")
    if dt <= 0:
        raise InputError("dt must be positive")
    if n < 1:
        raise InputError("need n >= 1 paths")
    x = np.asarray(x, dtype=float)
    X = np.tile(x, (n, 1)) if x.ndim == 1 else x.copy()
    if X.shape != (n, model.dim):
        raise ContractViolation(f"start shape {X.shape} != ({n}, {model.dim})")
    if noise is not None and len(_segment_plan(T, dt)) != len(noise):
        raise ContractViolation("supplied noise does not cover the step lattice")
    gen = make_generator(seed, stream)
    guard = BLOWUP_FACTOR * (1.0 + np.max(np.linalg.norm(X, axis=1), initial=0.0))
    kernels: dict = {}
    plan = _segment_plan(T, dt)
    times = [0.0]
    snaps = [X.copy()] if return_trajectory else None
    t_cur = 0.0
    k = 0
    for h in plan:
        X, _, k = _euler_segment(model, X, None, h, h, gen, guard, kernels,
                                 noise=noise, noise_offset=k)
        t_cur += h
        if return_trajectory:
            times.append(t_cur)
            snaps.append(X.copy())
    state = PathState(time=T, positions=X, seed=seed, stream=stream,
                      steps=len(plan))
    if return_trajectory:
        record = TrajectoryRecord(np.array(times), np.array(snaps), seed, stream)
        return state, record
    return state


def advance_states(handle: SemigroupHandle, X: np.ndarray, gap: float,
                   gen: np.random.Generator, kernels: dict) -> np.ndarray:
    """One transition of an ensemble over ``gap`` under the handle's law.

    Exact handles make a single Gaussian step; Monte Carlo handles run
    exponential Euler substeps of the handle's dt.
    """
    if gap == 0:
        return X
    if handle.deterministic:
        key = ("exact", round(gap, 14))
        kern = kernels.get(key)
        if kern is None:
            kern = _StepKernel(handle.model, gap)
            kernels[key] = kern
        z = gen.standard_normal(X.shape)
        return X @ kern.E.T + z @ kern.S.T
    guard = BLOWUP_FACTOR * (1.0 + np.max(np.linalg.norm(X, axis=1), initial=0.0))
    X, _, _ = _euler_segment(handle.model, X, None, gap, handle.dt, gen,
                             guard, kernels)
    return X


def path_snapshots(handle: SemigroupHandle, x, times, n: int, seed: int,
                   stream: int = 0) -> np.ndarray:
    """Common-noise ensemble states at each requested time.

    Returns an array of shape (len(times), n, d); ``times`` must be
    ascending and start at >= 0.
    """
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or (times.size and times[0] < 0):
        raise InputError("times must be ascending and nonnegative")
    x = np.asarray(x, dtype=float)
    X = np.tile(x, (n, 1)) if x.ndim == 1 else x.copy()
    gen = make_generator(seed, stream)
    kernels: dict = {}
    out = np.empty((times.size, n, handle.model.dim))
    prev = 0.0
    for i, t in enumerate(times):
        X = advance_states(handle, X, t - prev, gen, kernels)
        out[i] = X
        prev = t
    return out


# ---------------------------------------------------------------------------
# semigroup evaluation


def transition_apply(handle: SemigroupHandle, phi, t: float, x,
                     stream: int = 0) -> tuple[float, float]:
    """Semigroup action ``E[phi(X(t, x))]`` with a standard error.

    Exact handles return the deterministic value with zero stderr.
    """
    if t < 0 or not np.isfinite(t):
        raise InputError(f"time must be finite and >= 0, got {t}")
    x = np.asarray(x, dtype=float)
    if t == 0.0:
        return phi.value(handle.model, x), 0.0
    if handle.deterministic:
        return ou.ou_exact_apply(handle.model, t, phi, x), 0.0
    state = simulate_mild(handle.model, x, t, handle.dt, handle.n_samples,
                          handle.seed, stream)
    vals = phi.value_batch(handle.model, state.positions)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals)))


def generator_quotient(handle: SemigroupHandle, phi, x, t: float,
                       stream: int = 0) -> float:
    """Difference quotient ``(P_t phi(x) - phi(x)) / t``."""
    if t <= 0:
        raise InputError("quotient needs t > 0")
    value, _ = transition_apply(handle, phi, t, x, stream)
    return (value - phi.value(handle.model, np.asarray(x, dtype=float))) / t


def stochastic_continuity_check(handle: SemigroupHandle, x, t0: float,
                                offsets, n: int | None = None,
                                stream: int = 0) -> list[dict]:
    """Mean-square displacement table around t0 under common noise.

    Returns one row per offset with keys ``offset``, ``t``, ``msd``,
    ``stderr``; the offset-0 row is exactly zero.
    """
    if t0 < 0:
        raise InputError("t0 must be >= 0")
    offsets = np.asarray(offsets, dtype=float)
    ts = t0 + offsets
    if np.any(ts < 0):
        raise InputError("t0 + offset must be >= 0")
    n = n or max(handle.n_samples, 2)
    all_times = np.unique(np.concatenate((ts, [t0])))
    snaps = path_snapshots(handle, x, all_times, n, handle.seed, stream)
    ref = snaps[np.searchsorted(all_times, t0)]
    rows = []
    for off, t in zip(offsets, ts):
        cur = snaps[np.searchsorted(all_times, t)]
        sq = np.sum((cur - ref) ** 2, axis=1)
        rows.append({
            "offset": float(off), "t": float(t),
            "msd": float(sq.mean()),
            "stderr": float(sq.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
        })
    return rows


# ---------------------------------------------------------------------------
# first variation and gradients


@dataclass(frozen=True)
class FirstVariation:
    """Tangent vectors at time T along each sample path."""

    eta: np.ndarray      # (n, d)
    state: PathState
    direction: np.ndarray = field(compare=False, default=None)


def first_variation(model: GalerkinModel, x, h, T: float, dt: float, n: int,
                    seed: int, stream: int = 0) -> FirstVariation:
    """Tangent process in direction h along freshly simulated paths.

    Both the path and the tangent advance with the same exponential Euler
    kernel and the same noise; with a zero drift the tangent is the
    deterministic flow of h.
    """
    if T < 0 or dt <= 0 or n < 1:
        raise InputError("need T >= 0, dt > 0, n >= 1")
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    X = np.tile(x, (n, 1))
    eta = np.tile(h, (n, 1))
    gen = make_generator(seed, stream)
    guard = BLOWUP_FACTOR * (1.0 + float(np.linalg.norm(x)))
    kernels: dict = {}
    X, eta, _ = _euler_segment(model, X, eta, T, dt, gen, guard, kernels)
    state = PathState(time=T, positions=X, seed=seed, stream=stream,
                      steps=len(_segment_plan(T, dt)))
    return FirstVariation(eta=eta, state=state, direction=h)


def _gradient_batch(phi, model, X):
    if isinstance(phi, Constant):
        return np.zeros_like(X)
    if isinstance(phi, CylindricalExp):
        z = 1j * np.exp(1j * (X @ phi.h))
        zp = z.real if phi.part == "re" else z.imag
        return zp[:, None] * phi.h[None, :]
    if isinstance(phi, OUIntegralFunction):
        t = phi._grad_table(model)
        E = np.exp(1j * (X @ t.V.T) - 0.5 * t.q)
        G = 1j * ((E * t.w) @ t.V)
        return G.real if phi.part == "re" else G.imag
    if isinstance(phi, LinearCombination):
        out = np.zeros_like(X)
        for c, term in zip(phi.coefficients, phi.terms):
            out += c * _gradient_batch(term, model, X)
        return out
    return np.array([phi.gradient(model, row) for row in X])


def gradient_transition(handle: SemigroupHandle, f, t: float, x, h,
                        stream: int = 0) -> tuple[float, float]:
    """Directional derivative of the semigroup action,
    ``<D P_t f(x), h> = E[<D f(X(t,x)), eta^h(t,x)>]``.
    """
    if t < 0 or not np.isfinite(t):
        raise InputError(f"time must be finite and >= 0, got {t}")
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    model = handle.model
    if t == 0.0:
        return float(f.gradient(model, x) @ h), 0.0
    if handle.deterministic:
        return _exact_gradient_transition(model, f, t, x, h), 0.0
    fv = first_variation(model, x, h, t, handle.dt, handle.n_samples,
                         handle.seed, stream)
    grads = _gradient_batch(f, model, fv.state.positions)
    vals = np.sum(grads * fv.eta, axis=1)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals)))


def _exact_gradient_transition(model, f, t, x, h):
    if isinstance(f, Constant):
        return 0.0
    if isinstance(f, CylindricalExp):
        Eh = expm_apply(model.A, t, h)
        z = ou.ou_exact_cyl(model, t, f.h, x) * 1j * float(Eh @ f.h)
        return z.real if f.part == "re" else z.imag
    if isinstance(f, OUIntegralFunction):
        scale = max(1, int(np.ceil((f.a + t) / f.a)))
        wide = OUIntegralFunction(f.a + t, f.h, f.part, f.nodes * scale)
        head = OUIntegralFunction(t, f.h, f.part, f.nodes)
        g = wide.gradient(model, x) - head.gradient(model, x)
        return float(g @ h)
    if isinstance(f, LinearCombination):
        return sum(c * _exact_gradient_transition(model, term, t, x, h)
                   for c, term in zip(f.coefficients, f.terms))
    # generic fallback: central difference of the exact action
    eps = 1e-6
    up = ou.ou_exact_apply(model, t, f, x + eps * h)
    dn = ou.ou_exact_apply(model, t, f, x - eps * h)
    return (up - dn) / (2 * eps)


# ---------------------------------------------------------------------------
# trajectory export


def _fmt(v: float) -> str:
    return repr(float(v))


def export_trajectory_csv(record: TrajectoryRecord, path) -> None:
    """Write (sample, step, time, x_1..x_d) rows at full precision.

    Floats are printed with shortest round-trip representation, so
    re-importing reproduces the array bit-exactly.
    """
    K, n, d = record.positions.shape
    buf = io.StringIO()
    buf.write("sample,step,time," + ",".join(f"x_{j + 1}" for j in range(d)) + "\n")
    for i in range(n):
        for k in range(K):
            row = record.positions[k, i]
            buf.write(f"{i},{k},{_fmt(record.times[k])},"
                      + ",".join(_fmt(v) for v in row) + "\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def import_trajectory_csv(path, seed: int = 0, stream: int = 0) -> TrajectoryRecord:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        d = len(header) - 3
        samples, steps, times, coords = [], [], {}, []
        for line in fh:
            parts = line.strip().split(",")
            i, k = int(parts[0]), int(parts[1])
            samples.append(i)
            steps.append(k)
            times[k] = float(parts[2])
            coords.append([float(v) for v in parts[3:]])
    if not samples:
        raise InputError("trajectory file has no rows")
    n = max(samples) + 1
    K = max(steps) + 1
    positions = np.empty((K, n, d))
    for (i, k, row) in zip(samples, steps, coords):
        positions[k, i] = row
    t = np.array([times[k] for k in range(K)])
    return TrajectoryRecord(t, positions, seed, stream)
