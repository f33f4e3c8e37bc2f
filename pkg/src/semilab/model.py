"""The model tuple: dimension, drift operator A, noise covariance Q,
nonlinearity F, and declared growth constants.

Construction spot-checks the declared data: the flow growth bound
``||e^{tA}|| <= M e^{omega t}`` on a fixed time grid and the drift's
Lipschitz constant on random pairs.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .drifts import Drift, zero_drift
from .errors import ContractViolation, InputError
from .operators import CovarianceOperator, LinearOperator, log_norm, operator_norm
from .rng import make_generator

_token_counter = itertools.count(1)


@dataclass(frozen=True)
class GalerkinModel:
    """Immutable model data for one finite-dimensional truncation.

    ``growth_const`` (M >= 1) and ``growth_rate`` (omega) declare the
    bound ||e^{tA}|| <= M e^{omega t}.  ``token`` identifies the instance
    for caching; two models never share a token.
    """

    A: LinearOperator
    Q: CovarianceOperator
    drift: Drift
    growth_const: float = 1.0
    growth_rate: float | None = None
    token: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.A.dim != self.Q.dim:
            raise ContractViolation(
                f"A dim {self.A.dim} != Q dim {self.Q.dim}")
        if self.growth_const < 1.0:
            raise ContractViolation(f"growth constant must be >= 1, got {self.growth_const}")
        if self.growth_rate is None:
            object.__setattr__(self, "growth_rate", log_norm(self.A.entries))
        object.__setattr__(self, "token", next(_token_counter))
        self._check_growth_bound()
        self._check_drift()

    @property
    def dim(self) -> int:
        return self.A.dim

    def _check_growth_bound(self):
        M, omega = self.growth_const, self.growth_rate
        for t in np.arange(0.0, 2.0 + 1e-12, 0.1):
            norm = operator_norm(scipy.linalg.expm(t * self.A.entries))
            bound = M * math.exp(omega * t)
            if norm > bound * (1.0 + 1e-9):
                raise ContractViolation(
                    f"declared growth bound violated at t={t:.1f}: "
                    f"||e^(tA)|| = {norm:.6g} > {bound:.6g}")

    def _check_drift(self):
        d = self.dim
        f0 = self.drift(np.zeros(d))
        if not np.all(np.isfinite(f0)):
            raise ContractViolation("drift at 0 is not finite")
        if self.drift.lipschitz == 0.0:
            return
        gen = make_generator(0x5EED, stream=self.dim)
        x = gen.standard_normal((64, d))
        y = x + gen.standard_normal((64, d))
        num = np.linalg.norm(self.drift(x) - self.drift(y), axis=1)
        den = np.linalg.norm(x - y, axis=1)
        ratio = np.max(num / np.where(den > 0, den, 1.0))
        if ratio > 1.01 * self.drift.lipschitz:
            raise ContractViolation(
                f"empirical Lipschitz ratio {ratio:.4g} exceeds "
                f"1.01 * declared {self.drift.lipschitz:.4g}")

    def with_drift(self, drift: Drift) -> "GalerkinModel":
        return GalerkinModel(self.A, self.Q, drift,
                             growth_const=self.growth_const,
                             growth_rate=self.growth_rate)

    def without_drift(self) -> "GalerkinModel":
        if self.drift.is_zero:
            return self
        return self.with_drift(zero_drift(self.dim))


def build_model(A, Q, drift: Drift | None = None, *,
                growth_const: float = 1.0,
                growth_rate: float | None = None) -> GalerkinModel:
    """Convenience constructor from raw matrices."""
    A_op = A if isinstance(A, LinearOperator) else LinearOperator.from_matrix(A)
    Q_op = Q if isinstance(Q, CovarianceOperator) else CovarianceOperator(np.asarray(Q, dtype=float))
    if drift is None:
        drift = zero_drift(A_op.dim)
    return GalerkinModel(A_op, Q_op, drift,
                         growth_const=growth_const, growth_rate=growth_rate)
