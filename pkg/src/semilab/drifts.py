"""Drift (nonlinearity) handles and the named presets.

A drift is a Lipschitz map R^d -> R^d evaluated on batches of states,
optionally with an analytic directional derivative.  Presets:

* ``zero``   - no drift; the flow is the pure linear/Gaussian one.
* ``linear`` - F(x) = B x, norm-clipped at ``clip`` so F stays bounded.
* ``tanh``   - F(x) = scale * tanh(x), componentwise; smooth and bounded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractViolation, InputError

Array = np.ndarray


@dataclass(frozen=True)
class Drift:
    """Lipschitz drift with metadata used by growth and resolvent bounds.

    ``fn`` maps an (n, d) batch to an (n, d) batch.  ``jvp`` is the
    directional derivative ``(X, V) -> DF(X)[V]`` when one is available;
    ``derivative_sup`` bounds ||DF|| when finite.  ``bound`` is the sup
    norm of F (may be inf for merely Lipschitz drifts).
    """

    name: str
    fn: Callable[[Array], Array]
    lipschitz: float
    bound: float
    jvp: Callable[[Array, Array], Array] | None = None
    derivative_sup: float = math.inf
    params: dict = field(default_factory=dict)

    def __call__(self, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        flat = x.ndim == 1
        out = self.fn(x[None, :] if flat else x)
        return out[0] if flat else out

    def directional(self, x: Array, v: Array, fd_step: float = 1e-6) -> Array:
        """DF(x)[v], analytic when a handle exists, else central differences."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        flat = x.ndim == 1
        X = x[None, :] if flat else x
        V = np.broadcast_to(v, X.shape) if v.ndim == 1 else v
        if self.jvp is not None:
            out = self.jvp(X, V)
        else:
            norms = np.linalg.norm(V, axis=-1, keepdims=True)
            safe = np.where(norms > 0, norms, 1.0)
            h = fd_step * safe
            out = (self.fn(X + h * V / safe) - self.fn(X - h * V / safe)) / (2 * fd_step)
            out = out * (norms > 0)
        return out[0] if flat else out

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"


def zero_drift(dim: int) -> Drift:
    return Drift(
        name="zero",
        fn=lambda x: np.zeros_like(x),
        lipschitz=0.0,
        bound=0.0,
        jvp=lambda x, v: np.zeros_like(v),
        derivative_sup=0.0,
        params={"dim": dim},
    )


def tanh_drift(dim: int, scale: float = 0.5) -> Drift:
    """Componentwise saturating drift, scale * tanh(x)."""
    if scale < 0:
        raise InputError("scale must be >= 0")

    def fn(x):
        return scale * np.tanh(x)

    def jvp(x, v):
        sech2 = 1.0 - np.tanh(x) ** 2
        return scale * sech2 * v

    return Drift(
        name="tanh",
        fn=fn,
        lipschitz=scale,
        bound=scale * math.sqrt(dim),
        jvp=jvp,
        derivative_sup=scale,
        params={"dim": dim, "scale": scale},
    )


def linear_drift(matrix, clip: float = math.inf) -> Drift:
    """F(x) = B x, rescaled onto the ball of radius ``clip`` when it leaves it.

    The clip keeps F bounded; the derivative handle is exact away from the
    clipping sphere (where the map is not differentiable).
    """
    B = np.array(matrix, dtype=float)
    if B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise ContractViolation(f"drift matrix must be square, got {B.shape}")
    if clip <= 0:
        raise InputError("clip must be positive")
    lip = float(np.linalg.norm(B, 2))

    def fn(x):
        y = x @ B.T
        if not math.isinf(clip):
            norms = np.linalg.norm(y, axis=-1, keepdims=True)
            factor = np.where(norms > clip, clip / np.where(norms > 0, norms, 1.0), 1.0)
            y = y * factor
        return y

    def jvp(x, v):
        y = x @ B.T
        bv = v @ B.T
        if math.isinf(clip):
            return bv
        norms = np.linalg.norm(y, axis=-1, keepdims=True)
        inside = norms <= clip
        # outside: derivative of clip * y/|y|
        safe = np.where(norms > 0, norms, 1.0)
        proj = bv / safe - y * np.sum(y * bv, axis=-1, keepdims=True) / safe**3
        return np.where(inside, bv, clip * proj)

    return Drift(
        name="linear",
        fn=fn,
        lipschitz=lip,
        bound=float(clip),
        jvp=jvp,
        derivative_sup=lip,
        params={"matrix": B.tolist(), "clip": clip},
    )


_PRESETS = {"zero", "linear", "tanh"}


def drift_from_spec(dim: int, spec: dict) -> Drift:
    """Build a preset drift from its serialised form."""
    name = spec.get("preset")
    if name not in _PRESETS:
        raise InputError(f"unknown drift preset {name!r}; known: {sorted(_PRESETS)}")
    if name == "zero":
        return zero_drift(dim)
    if name == "tanh":
        return tanh_drift(dim, scale=float(spec.get("scale", 0.5)))
    matrix = spec.get("matrix")
    if matrix is None:
        raise InputError("linear drift needs a 'matrix' entry")
    return linear_drift(matrix, clip=float(spec.get("clip", math.inf)))
