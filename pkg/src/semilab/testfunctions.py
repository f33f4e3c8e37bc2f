"""The explicit test-function bank.

Two building blocks, plus constants and finite linear combinations:

* cylindrical exponentials, the real or imaginary part of
  ``x -> exp(i <x, h>)``;
* integral functions of the linear flow,
  ``x -> integral_0^a exp(i <e^{sA} x, h> - <C(s) h, h> / 2) ds``,
  where ``C(s)`` is the flow covariance.  These are bounded by ``a``,
  smooth, and closed under the exact linear semigroup, which makes them
  the workhorse class for every generator identity in the package.

Gradients and Hessians are differentiated under the integral sign, so
every derivative is again a quadrature of an explicit integrand.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ContractViolation, InputError, NumericalError
from .model import GalerkinModel
from .operators import flow_covariance_table
from .quadrature import gauss_legendre_rule, split_rule
from .rng import make_generator

__all__ = [
    "CylindricalExp",
    "OUIntegralFunction",
    "Constant",
    "LinearCombination",
    "TestFunction",
    "kolmogorov_apply",
    "kolmogorov_batch",
    "kolmogorov_fd",
    "default_bank",
    "bank_to_json",
    "bank_from_json",
    "function_to_payload",
    "function_from_payload",
]

_PARTS = ("re", "im")


def _check_part(part: str) -> str:
    if part not in _PARTS:
        raise ContractViolation(f"part must be 're' or 'im', got {part!r}")
    return part


def _check_point(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dim:
        raise ContractViolation(f"point dim {x.shape[-1]} != model dim {dim}")
    if not np.all(np.isfinite(x)):
        raise InputError("evaluation point has non-finite entries")
    return x


def _take(part: str, z):
    return np.real(z) if part == "re" else np.imag(z)


# ---------------------------------------------------------------------------
# node tables for the integral functions


@dataclass(frozen=True)
class _NodeTable:
    s: np.ndarray      # (m,) quadrature nodes in [0, a]
    w: np.ndarray      # (m,) quadrature weights
    V: np.ndarray      # (m, d) rows e^{s A^T} h
    q: np.ndarray      # (m,) <C(s) h, h>
    c: np.ndarray      # (m,) <Q v, v>, the trace-term coefficient


_TABLE_CACHE: OrderedDict = OrderedDict()
_TABLE_CACHE_MAX = 512


def _cached(cache: OrderedDict, key, build):
    hit = cache.get(key)
    if hit is not None:
        cache.move_to_end(key)
        return hit
    value = build()
    cache[key] = value
    if len(cache) > _TABLE_CACHE_MAX:
        cache.popitem(last=False)
    return value


_FLOW_CACHE: OrderedDict = OrderedDict()


def _flow_table(model: GalerkinModel, a: float, nodes: int):
    def build():
        panels, order = split_rule(nodes, a)
        s, w = gauss_legendre_rule(0.0, a, panels, order)
        flows, covs = flow_covariance_table(model.A, model.Q, s)
        return s, w, flows, covs

    return _cached(_FLOW_CACHE, (model.token, float(a), int(nodes)), build)


def _node_table(model: GalerkinModel, a: float, h: np.ndarray, nodes: int) -> _NodeTable:
    def build():
        s, w, flows, covs = _flow_table(model, a, nodes)
        V = np.einsum("mij,i->mj", flows, h)
        q = np.einsum("mij,i,j->m", covs, h, h)
        c = np.einsum("md,de,me->m", V, model.Q.entries, V)
        return _NodeTable(s, w, V, q, c)

    return _cached(_TABLE_CACHE, (model.token, float(a), int(nodes), h.tobytes()), build)


def integral_function_fields(model: GalerkinModel, a: float, h: np.ndarray,
                             nodes: int, X: np.ndarray,
                             with_generator: bool = False,
                             chunk: int = 65536):
    """Complex values (and optionally generator values) on a batch.

    Returns ``values`` or ``(values, k0_values)`` as complex arrays of
    length n, where ``k0_values`` applies the second-order operator
    ``Tr[Q D^2]/2 + <Ax, D.> + <D., F(x)>`` to the complex integral
    function.  Work is chunked so intermediates stay at
    ``chunk * nodes`` floats.
    """
    table = _node_table(model, a, h, nodes)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    amp = table.w * np.exp(-0.5 * table.q)
    values = np.empty(n, dtype=complex)
    k0 = np.empty(n, dtype=complex) if with_generator else None
    use_drift = with_generator and not model.drift.is_zero
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        Xc = X[lo:hi]
        theta = Xc @ table.V.T
        cos, sin = np.cos(theta), np.sin(theta)
        values[lo:hi] = cos @ amp + 1j * (sin @ amp)
        if with_generator:
            B = (Xc @ model.A.entries.T) @ table.V.T
            if use_drift:
                B = B + model.drift(Xc) @ table.V.T
            # (iB - c/2) e^{i theta}: re = -B sin - c cos / 2, im = B cos - c sin / 2
            half_c = 0.5 * table.c
            re = (-B * sin - half_c * cos) @ amp
            im = (B * cos - half_c * sin) @ amp
            k0[lo:hi] = re + 1j * im
    if with_generator:
        return values, k0
    return values


# ---------------------------------------------------------------------------
# the function classes


@dataclass(frozen=True)
class CylindricalExp:
    """Real or imaginary part of exp(i <x, h>)."""

    h: np.ndarray
    part: str = "re"

    def __post_init__(self):
        h = np.array(self.h, dtype=float)
        if h.ndim != 1 or not np.all(np.isfinite(h)):
            raise InputError("frequency h must be a finite vector")
        h.flags.writeable = False
        object.__setattr__(self, "h", h)
        _check_part(self.part)

    def complex_batch(self, model, X):
        X = np.atleast_2d(_check_point(X, self.h.size))
        return np.exp(1j * (X @ self.h))

    def value_batch(self, model, X):
        return _take(self.part, self.complex_batch(model, X))

    def value(self, model, x):
        return float(self.value_batch(model, x)[0])

    def gradient(self, model, x):
        x = _check_point(x, self.h.size)
        z = 1j * np.exp(1j * float(x @ self.h))
        return _take(self.part, z) * self.h

    def hessian(self, model, x):
        x = _check_point(x, self.h.size)
        z = -np.exp(1j * float(x @ self.h))
        return _take(self.part, z) * np.outer(self.h, self.h)

    def sup_bound(self):
        return 1.0


@dataclass(frozen=True)
class OUIntegralFunction:
    """Flow-integral function with upper limit ``a`` and frequency ``h``.

    Bounded by ``a``; evaluation integrates the complex integrand with a
    composite Gauss-Legendre rule of about ``nodes`` points.
    """

    a: float
    h: np.ndarray
    part: str = "re"
    nodes: int = 128

    def __post_init__(self):
        if not np.isfinite(self.a) or self.a <= 0:
            raise InputError(f"upper limit a must be positive, got {self.a}")
        if self.nodes < 2:
            raise InputError("need at least 2 quadrature nodes")
        h = np.array(self.h, dtype=float)
        if h.ndim != 1 or not np.all(np.isfinite(h)):
            raise InputError("frequency h must be a finite vector")
        h.flags.writeable = False
        object.__setattr__(self, "h", h)
        _check_part(self.part)

    def complex_batch(self, model, X, nodes=None):
        X = np.atleast_2d(_check_point(X, self.h.size))
        return integral_function_fields(model, self.a, self.h,
                                        nodes or self.nodes, X)

    def value_batch(self, model, X):
        return _take(self.part, self.complex_batch(model, X))

    def value(self, model, x, tol=1e-10, max_nodes=4096):
        """Adaptive evaluation: node count doubles until stable to ``tol``."""
        x = np.atleast_2d(_check_point(x, self.h.size))
        m = self.nodes
        prev = complex(self.complex_batch(model, x, nodes=m)[0])
        while m < max_nodes:
            m *= 2
            cur = complex(self.complex_batch(model, x, nodes=m)[0])
            if abs(cur - prev) < tol:
                return float(_take(self.part, cur))
            prev = cur
        raise NumericalError(
            f"quadrature for a={self.a} did not stabilise below {tol} "
            f"within {max_nodes} nodes")

    def _grad_table(self, model):
        return _node_table(model, self.a, self.h, self.nodes)

    def gradient(self, model, x):
        x = _check_point(x, self.h.size)
        t = self._grad_table(model)
        phase = np.exp(1j * (t.V @ x) - 0.5 * t.q)
        g = (1j * t.w * phase) @ t.V
        return _take(self.part, g)

    def hessian(self, model, x):
        x = _check_point(x, self.h.size)
        t = self._grad_table(model)
        phase = np.exp(1j * (t.V @ x) - 0.5 * t.q)
        H = -np.einsum("m,md,me->de", t.w * phase, t.V, t.V)
        return _take(self.part, H)

    def sup_bound(self):
        return float(self.a)


@dataclass(frozen=True)
class Constant:
    c: float

    def __post_init__(self):
        if not np.isfinite(self.c):
            raise InputError("constant must be finite")

    def value_batch(self, model, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.full(X.shape[0], float(self.c))

    def value(self, model, x):
        return float(self.c)

    def gradient(self, model, x):
        return np.zeros(np.asarray(x).shape[-1])

    def hessian(self, model, x):
        d = np.asarray(x).shape[-1]
        return np.zeros((d, d))

    def sup_bound(self):
        return abs(float(self.c))


@dataclass(frozen=True)
class LinearCombination:
    coefficients: tuple
    terms: tuple

    def __post_init__(self):
        if len(self.coefficients) != len(self.terms):
            raise ContractViolation("coefficient/term count mismatch")
        coeffs = tuple(float(c) for c in self.coefficients)
        if not all(np.isfinite(coeffs)):
            raise InputError("coefficients must be finite")
        object.__setattr__(self, "coefficients", coeffs)
        object.__setattr__(self, "terms", tuple(self.terms))

    def value_batch(self, model, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros(X.shape[0])
        for c, term in zip(self.coefficients, self.terms):
            out += c * term.value_batch(model, X)
        return out

    def value(self, model, x):
        return sum(c * term.value(model, x)
                   for c, term in zip(self.coefficients, self.terms))

    def gradient(self, model, x):
        return sum(c * term.gradient(model, x)
                   for c, term in zip(self.coefficients, self.terms))

    def hessian(self, model, x):
        return sum(c * term.hessian(model, x)
                   for c, term in zip(self.coefficients, self.terms))

    def sup_bound(self):
        return sum(abs(c) * term.sup_bound()
                   for c, term in zip(self.coefficients, self.terms))


TestFunction = Union[CylindricalExp, OUIntegralFunction, Constant, LinearCombination]


# ---------------------------------------------------------------------------
# the second-order operator


def kolmogorov_apply(phi, model: GalerkinModel, x) -> float:
    """Apply ``Tr[Q D^2 phi]/2 + <Ax, D phi> + <D phi, F(x)>`` at a point.

    The middle term is computed as ``<Ax, D phi>``, equivalent to
    ``<x, A^T D phi>`` in finite dimensions.
    """
    x = _check_point(x, model.dim)
    fx = model.drift(x)
    if not np.all(np.isfinite(fx)):
        raise InputError("drift value not finite at evaluation point")
    g = phi.gradient(model, x)
    H = phi.hessian(model, x)
    trace_term = 0.5 * float(np.sum(model.Q.entries * H))
    return trace_term + float((model.A.entries @ x) @ g) + float(g @ fx)


def kolmogorov_batch(phi, model: GalerkinModel, X) -> np.ndarray:
    """Vectorised ``kolmogorov_apply`` over rows of X."""
    X = np.atleast_2d(_check_point(X, model.dim))
    if isinstance(phi, Constant):
        return np.zeros(X.shape[0])
    if isinstance(phi, LinearCombination):
        out = np.zeros(X.shape[0])
        for c, term in zip(phi.coefficients, phi.terms):
            out += c * kolmogorov_batch(term, model, X)
        return out
    if isinstance(phi, OUIntegralFunction):
        _, k0 = integral_function_fields(model, phi.a, phi.h, phi.nodes, X,
                                         with_generator=True)
        return _take(phi.part, k0)
    if isinstance(phi, CylindricalExp):
        h = phi.h
        E = np.exp(1j * (X @ h))
        B = (X @ model.A.entries.T) @ h
        if not model.drift.is_zero:
            B = B + model.drift(X) @ h
        qhh = float(h @ (model.Q.entries @ h))
        return _take(phi.part, (1j * B - 0.5 * qhh) * E)
    return np.array([kolmogorov_apply(phi, model, row) for row in X])


def kolmogorov_fd(fun, model: GalerkinModel, x, step: float = 3e-4) -> float:
    """Finite-difference version of the operator for black-box functions.

    ``fun`` takes a batch (n, d) and returns (n,) values.  Used to check
    solutions that exist only as numerical evaluations.
    """
    x = _check_point(x, model.dim)
    d = x.size
    eye = np.eye(d)
    pts = [x]
    for i in range(d):
        pts.extend((x + step * eye[i], x - step * eye[i]))
    for i in range(d):
        for j in range(i + 1, d):
            pts.extend((x + step * (eye[i] + eye[j]),
                        x - step * (eye[i] + eye[j]),
                        x + step * (eye[i] - eye[j]),
                        x - step * (eye[i] - eye[j])))
    vals = np.asarray(fun(np.array(pts)))
    f0 = vals[0]
    grad = np.empty(d)
    hess = np.empty((d, d))
    for i in range(d):
        fp, fm = vals[1 + 2 * i], vals[2 + 2 * i]
        grad[i] = (fp - fm) / (2 * step)
        hess[i, i] = (fp + fm - 2 * f0) / step**2
    k = 1 + 2 * d
    for i in range(d):
        for j in range(i + 1, d):
            fpp, fmm, fpm, fmp = vals[k:k + 4]
            k += 4
            hess[i, j] = hess[j, i] = (fpp + fmm - fpm - fmp) / (4 * step**2)
    fx = model.drift(x)
    return (0.5 * float(np.sum(model.Q.entries * hess))
            + float((model.A.entries @ x) @ grad) + float(grad @ fx))


# ---------------------------------------------------------------------------
# serialisation and the default bank


def function_to_payload(phi) -> dict:
    if isinstance(phi, CylindricalExp):
        return {"kind": "cylindrical", "h": phi.h.tolist(), "part": phi.part}
    if isinstance(phi, OUIntegralFunction):
        return {"kind": "flow-integral", "a": phi.a, "h": phi.h.tolist(),
                "part": phi.part, "nodes": phi.nodes}
    if isinstance(phi, Constant):
        return {"kind": "constant", "c": phi.c}
    if isinstance(phi, LinearCombination):
        return {"kind": "combination",
                "coefficients": list(phi.coefficients),
                "terms": [function_to_payload(t) for t in phi.terms]}
    raise ContractViolation(f"not a serialisable test function: {type(phi)!r}")


def function_from_payload(payload: dict):
    kind = payload.get("kind")
    if kind == "cylindrical":
        return CylindricalExp(np.array(payload["h"]), payload["part"])
    if kind == "flow-integral":
        return OUIntegralFunction(payload["a"], np.array(payload["h"]),
                                  payload["part"], payload.get("nodes", 128))
    if kind == "constant":
        return Constant(payload["c"])
    if kind == "combination":
        return LinearCombination(tuple(payload["coefficients"]),
                                 tuple(function_from_payload(t)
                                       for t in payload["terms"]))
    raise InputError(f"unknown test-function kind {kind!r}")


def bank_to_json(bank) -> str:
    return json.dumps([function_to_payload(phi) for phi in bank], indent=1)


def bank_from_json(text: str):
    return [function_from_payload(p) for p in json.loads(text)]


def default_bank(dim: int, seed: int = 0x0B4A7, nodes: int = 32):
    """The standard 16-function bank: 4 seeded frequencies, upper limits
    0.5 and 1, both parts."""
    gen = make_generator(seed, stream=dim)
    bank = []
    for _ in range(4):
        h = gen.standard_normal(dim)
        h *= gen.uniform(0.3, 0.9) / np.linalg.norm(h)
        for a in (0.5, 1.0):
            for part in _PARTS:
                bank.append(OUIntegralFunction(a, h.copy(), part, nodes))
    return bank
