import math

import numpy as np
import pytest
import scipy.integrate
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from semilab.errors import ContractViolation, InputError
from semilab.operators import (
    CovarianceOperator,
    LinearOperator,
    covariance_Qt,
    expm_apply,
    flow_covariance_table,
    gaussian_sample,
    log_norm,
    operator_norm,
)


def random_operator(rng, d, norm_cap=2.0):
    m = rng.standard_normal((d, d))
    m *= norm_cap * rng.uniform(0.1, 1.0) / max(operator_norm(m), 1e-12)
    return LinearOperator.from_matrix(m)


def random_covariance(rng, d, scale=1.0):
    g = rng.standard_normal((d, d))
    c = scale * (g @ g.T) / d
    return CovarianceOperator(c)


class TestExpmApply:
    def test_identity_at_zero(self):
        A = LinearOperator.from_matrix([[0.3, -1.0], [0.5, 0.2]])
        x = np.array([1.0, -2.0])
        np.testing.assert_array_equal(expm_apply(A, 0.0, x), x)

    def test_scalar_closed_form(self):
        # d=1, A=[1], t=ln 2: e^{tA} x = 2 x
        A = LinearOperator.from_matrix([[1.0]])
        out = expm_apply(A, math.log(2.0), np.array([1.0]))
        np.testing.assert_allclose(out, [2.0], rtol=1e-12)

    def test_nilpotent_closed_form(self):
        # strictly upper-triangular A: e^A = I + A exactly
        A = LinearOperator.from_matrix([[0.0, 1.0], [0.0, 0.0]])
        out = expm_apply(A, 1.0, np.array([0.0, 1.0]))
        np.testing.assert_allclose(out, [1.0, 1.0], rtol=0, atol=1e-14)
        # independent scaling-and-squaring oracle: squared half-step
        half = scipy.linalg.expm(0.5 * A.entries)
        np.testing.assert_allclose(half @ half @ [0.0, 1.0], out, atol=1e-14)

    def test_semigroup_law_random(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            d = rng.integers(1, 5)
            A = random_operator(rng, d)
            t, s = rng.uniform(0, 1, 2)
            x = rng.standard_normal(d)
            once = expm_apply(A, t + s, x)
            twice = expm_apply(A, t, expm_apply(A, s, x))
            np.testing.assert_allclose(twice, once, rtol=1e-10, atol=1e-12)

    def test_errors(self):
        A = LinearOperator.from_matrix([[1.0]])
        with pytest.raises(ContractViolation):
            expm_apply(A, 1.0, np.array([1.0, 2.0]))
        with pytest.raises(InputError):
            expm_apply(A, 1.0, np.array([np.nan]))
        with pytest.raises(InputError):
            expm_apply(A, -0.5, np.array([1.0]))

    def test_batch_rows(self):
        A = LinearOperator.from_matrix([[0.0, 1.0], [-1.0, 0.0]])
        X = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = expm_apply(A, math.pi / 2, X)
        np.testing.assert_allclose(out, [[0.0, -1.0], [1.0, 0.0]], atol=1e-12)


class TestCovarianceQt:
    def test_zero_time(self):
        A = LinearOperator.from_matrix([[1.0]])
        Q = CovarianceOperator([[2.0]])
        np.testing.assert_array_equal(covariance_Qt(A, Q, 0.0).entries, [[0.0]])

    def test_zero_generator_gives_tQ(self):
        A = LinearOperator.from_matrix(np.zeros((2, 2)))
        Q = CovarianceOperator([[1.0, 0.2], [0.2, 0.5]])
        out = covariance_Qt(A, Q, 0.7)
        np.testing.assert_allclose(out.entries, 0.7 * Q.entries, rtol=1e-13)

    def test_scalar_closed_form(self):
        # d=1: integral of q e^{2as} is q (e^{2at} - 1) / (2a)
        a, q, t = -0.8, 1.7, 1.3
        A = LinearOperator.from_matrix([[a]])
        Q = CovarianceOperator([[q]])
        expected = q * (math.exp(2 * a * t) - 1.0) / (2 * a)
        out = covariance_Qt(A, Q, t)
        np.testing.assert_allclose(out.entries, [[expected]], rtol=1e-12)
        # fine-quadrature oracle
        ref, _ = scipy.integrate.quad(lambda s: q * math.exp(2 * a * s), 0, t,
                                      epsabs=1e-14, epsrel=1e-14)
        np.testing.assert_allclose(out.entries[0, 0], ref, rtol=1e-12)

    def test_matrix_case_against_quad_oracle(self):
        rng = np.random.default_rng(11)
        A = random_operator(rng, 2)
        Q = random_covariance(rng, 2)
        t = 0.9
        out = covariance_Qt(A, Q, t).entries

        def entry(i, j):
            def f(s):
                E = scipy.linalg.expm(s * A.entries)
                return (E @ Q.entries @ E.T)[i, j]
            val, _ = scipy.integrate.quad(f, 0, t, epsabs=1e-13, epsrel=1e-13)
            return val

        ref = np.array([[entry(i, j) for j in range(2)] for i in range(2)])
        np.testing.assert_allclose(out, ref, atol=1e-11)

    def test_refinement_stable(self):
        rng = np.random.default_rng(3)
        A = random_operator(rng, 3)
        Q = random_covariance(rng, 3)
        c64 = covariance_Qt(A, Q, 1.5, steps=64).entries
        c128 = covariance_Qt(A, Q, 1.5, steps=128).entries
        assert np.max(np.abs(c64 - c128)) < 1e-10

    def test_output_symmetric_psd(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            d = rng.integers(1, 5)
            A = random_operator(rng, d)
            Q = random_covariance(rng, d)
            C = covariance_Qt(A, Q, rng.uniform(0.1, 2.0))
            assert np.max(np.abs(C.entries - C.entries.T)) <= 1e-12
            evals, _ = C.eig()
            assert evals.min() >= -1e-10 * np.trace(C.entries)

    def test_decomposition_identity(self):
        # C(t+s) = C(s) + e^{sA} C(t) e^{sA^T}
        rng = np.random.default_rng(13)
        for _ in range(50):
            d = rng.integers(1, 4)
            A = random_operator(rng, d)
            Q = random_covariance(rng, d)
            t, s = rng.uniform(0.05, 1.0, 2)
            E = scipy.linalg.expm(s * A.entries)
            lhs = covariance_Qt(A, Q, t + s).entries
            rhs = covariance_Qt(A, Q, s).entries + E @ covariance_Qt(A, Q, t).entries @ E.T
            assert np.max(np.abs(lhs - rhs)) <= 1e-9

    def test_negative_time_rejected(self):
        A = LinearOperator.from_matrix([[1.0]])
        Q = CovarianceOperator([[1.0]])
        with pytest.raises(InputError):
            covariance_Qt(A, Q, -1.0)


class TestGaussianSample:
    def test_degenerate_zero_covariance(self):
        C = CovarianceOperator(np.zeros((3, 3)))
        out = gaussian_sample(C, 5, seed=1)
        np.testing.assert_array_equal(out, np.zeros((5, 3)))

    def test_mean_clt_bound(self):
        C = CovarianceOperator(np.eye(2))
        out = gaussian_sample(C, 100_000, seed=42)
        assert np.all(np.abs(out.mean(axis=0)) < 3.0 / math.sqrt(100_000))

    def test_covariance_concentration(self):
        C = CovarianceOperator(np.diag([1.0, 4.0]))
        out = gaussian_sample(C, 100_000, seed=9)
        emp = np.cov(out.T)
        np.testing.assert_allclose(np.diag(emp), [1.0, 4.0], rtol=0.05)

    def test_seed_reproducibility(self):
        C = CovarianceOperator([[1.0, 0.3], [0.3, 2.0]])
        a = gaussian_sample(C, 100, seed=77, stream=4)
        b = gaussian_sample(C, 100, seed=77, stream=4)
        np.testing.assert_array_equal(a, b)
        c = gaussian_sample(C, 100, seed=77, stream=5)
        assert not np.array_equal(a, c)

    def test_tiny_negative_eigenvalue_clamped(self):
        eps = 1e-12
        C = CovarianceOperator([[1.0, 0.0], [0.0, -eps]])
        out = gaussian_sample(C, 10, seed=0)
        assert np.all(out[:, 1] == 0.0)

    def test_too_negative_rejected(self):
        with pytest.raises(ContractViolation):
            CovarianceOperator([[1.0, 0.0], [0.0, -1e-3]])


class TestOperatorTypes:
    def test_self_adjoint_flag_enforced(self):
        with pytest.raises(ContractViolation):
            LinearOperator([[0.0, 1.0], [0.0, 0.0]], self_adjoint=True)
        op = LinearOperator.from_matrix([[1.0, 0.5], [0.5, 2.0]])
        assert op.self_adjoint

    def test_nonfinite_rejected(self):
        with pytest.raises(InputError):
            LinearOperator.from_matrix([[np.inf, 0.0], [0.0, 1.0]])

    def test_asymmetric_covariance_rejected(self):
        with pytest.raises(ContractViolation):
            CovarianceOperator([[1.0, 0.2], [0.0, 1.0]])

    @given(st.integers(min_value=1, max_value=6))
    @settings(max_examples=20, deadline=None)
    def test_log_norm_bounds_flow(self, d):
        rng = np.random.default_rng(d)
        m = rng.standard_normal((d, d))
        mu = log_norm(m)
        for t in (0.1, 0.5, 1.0):
            assert operator_norm(scipy.linalg.expm(t * m)) <= math.exp(mu * t) * (1 + 1e-9)


class TestFlowCovarianceTable:
    def test_matches_direct_quadrature(self):
        rng = np.random.default_rng(21)
        A = random_operator(rng, 3)
        Q = random_covariance(rng, 3)
        times = np.array([0.0, 0.125, 0.5, 0.51, 1.0])
        flows, covs = flow_covariance_table(A, Q, times)
        for t, E, C in zip(times, flows, covs):
            np.testing.assert_allclose(E, scipy.linalg.expm(t * A.entries),
                                       rtol=1e-12, atol=1e-13)
            np.testing.assert_allclose(C, covariance_Qt(A, Q, t, steps=128).entries,
                                       atol=1e-12)

    def test_rejects_descending(self):
        A = LinearOperator.from_matrix([[0.0]])
        Q = CovarianceOperator([[1.0]])
        with pytest.raises(InputError):
            flow_covariance_table(A, Q, np.array([0.5, 0.2]))
