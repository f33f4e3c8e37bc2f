import math

import numpy as np
import pytest
import scipy.integrate

from semilab.errors import ContractViolation, InputError
from semilab.measures import (
    MeasureTrajectory,
    ParticleMeasure,
    ResolventFunction,
    backward_solution,
    backward_solution_batch,
    bernstein_approx,
    cesaro_smooth,
    dual_pushforward,
    duality_check,
    evolve_measure,
    measure_equation_residual,
    measure_equation_stream,
    resolvent_apply,
    semigroup_curve,
)
from semilab.model import build_model
from semilab.operators import CovarianceOperator, covariance_Qt, expm_apply
from semilab.ou import ou_apply_gh, ou_exact_cyl
from semilab.sde import exact_ou_handle, mc_handle
from semilab.testfunctions import (
    Constant,
    CylindricalExp,
    OUIntegralFunction,
    default_bank,
    kolmogorov_fd,
)


@pytest.fixture(scope="module")
def ou_model():
    A = np.array([[-1.0, 0.5], [0.0, -0.8]])
    Q = 0.2 * np.eye(2)
    return build_model(A, Q)


@pytest.fixture(scope="module")
def ou_handle(ou_model):
    return exact_ou_handle(ou_model, seed=101)


def uniform_measure(rng, n, d, label="cloud"):
    return ParticleMeasure(rng.standard_normal((n, d)), np.full(n, 1.0 / n), label)


class TestParticleMeasure:
    def test_invariants(self):
        mu = ParticleMeasure(np.zeros((3, 2)), np.array([0.5, 0.25, 0.25]))
        assert mu.is_probability
        assert mu.total_variation == 1.0
        signed = ParticleMeasure(np.zeros((2, 1)), np.array([0.5, -0.5]))
        assert not signed.is_probability
        assert signed.total_variation == 1.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            ParticleMeasure(np.zeros((3, 2)), np.ones(2))

    def test_nonfinite_rejected(self):
        with pytest.raises(InputError):
            ParticleMeasure(np.full((1, 1), np.nan), np.ones(1))

    def test_trajectory_grid_validation(self):
        mu = ParticleMeasure.dirac(np.zeros(2))
        with pytest.raises(ContractViolation):
            MeasureTrajectory(np.array([0.1, 0.2]), (mu, mu))
        with pytest.raises(ContractViolation):
            MeasureTrajectory(np.array([0.0, 0.0]), (mu, mu))


class TestDualPushforward:
    def test_zero_time_identity(self, ou_handle):
        rng = np.random.default_rng(1)
        mu = uniform_measure(rng, 20, 2)
        nu = dual_pushforward(ou_handle, mu, 0.0, 1, seed=5)
        np.testing.assert_array_equal(nu.positions, mu.positions)
        np.testing.assert_allclose(nu.weights, mu.weights, rtol=0, atol=0)

    def test_point_mass_matches_gaussian_law(self, ou_model, ou_handle):
        x = np.array([0.4, -0.3])
        t = 0.7
        nu = dual_pushforward(ou_handle, ParticleMeasure.dirac(x), t,
                              samples_per_particle=60_000, seed=8)
        mean_want = expm_apply(ou_model.A, t, x)
        cov_want = covariance_Qt(ou_model.A, ou_model.Q, t).entries
        se = nu.positions.std(axis=0, ddof=1) / math.sqrt(nu.size)
        assert np.all(np.abs(nu.positions.mean(axis=0) - mean_want) < 3 * se)
        np.testing.assert_allclose(np.cov(nu.positions.T), cov_want, rtol=0.05)

    def test_mass_conservation(self, ou_handle):
        rng = np.random.default_rng(2)
        mu = uniform_measure(rng, 33, 2)
        nu = dual_pushforward(ou_handle, mu, 0.5, 7, seed=3)
        assert abs(nu.weights.sum() - 1.0) <= 1e-12
        assert nu.is_probability

    def test_total_variation_never_inflated(self, ou_handle):
        rng = np.random.default_rng(4)
        w = rng.standard_normal(21)
        mu = ParticleMeasure(rng.standard_normal((21, 2)), w)
        nu = dual_pushforward(ou_handle, mu, 0.3, 4, seed=6)
        assert nu.total_variation <= mu.total_variation * (1 + 1e-12)


class TestDuality:
    def test_shared_samples_reorder_exactly(self, ou_handle):
        rng = np.random.default_rng(7)
        mu = uniform_measure(rng, 40, 2)
        phi = CylindricalExp(np.array([0.8, -0.5]), "re")
        res, se = duality_check(ou_handle, phi, mu, 0.6, 32, seed=11, shared=True)
        assert res <= 1e-12 and se == 0.0

    def test_independent_seeds_within_error(self, ou_handle):
        rng = np.random.default_rng(8)
        mu = uniform_measure(rng, 30, 2)
        fails = 0
        for trial in range(25):
            h = rng.standard_normal(2)
            h *= 0.8 / np.linalg.norm(h)
            phi = CylindricalExp(h, "im")
            res, se = duality_check(ou_handle, phi, mu, rng.uniform(0.1, 1.0),
                                    64, seed=200 + trial, shared=False)
            fails += res > 3 * se
        assert fails <= 3

    def test_constant_exact_both_sides(self, ou_handle):
        rng = np.random.default_rng(9)
        mu = uniform_measure(rng, 10, 2)
        res, _ = duality_check(ou_handle, Constant(2.0), mu, 0.5, 8, seed=1,
                               shared=False)
        assert res <= 1e-12


class TestMeasureEquation:
    def test_residual_zero_at_time_origin(self, ou_model, ou_handle):
        mu = ParticleMeasure.dirac(np.array([0.3, -0.2]))
        times = np.linspace(0.0, 0.5, 9)
        traj = evolve_measure(ou_handle, mu, times, seed=21, expand_to=5000)
        table = measure_equation_residual(traj, default_bank(2), ou_model)
        np.testing.assert_array_equal(table.residuals[:, 0], 0.0)

    def test_point_mass_residuals_small(self, ou_model, ou_handle):
        mu = ParticleMeasure.dirac(np.array([0.3, -0.2]))
        times = np.linspace(0.0, 1.0, 33)
        table = measure_equation_stream(ou_handle, mu, times,
                                        default_bank(2, nodes=16),
                                        seed=23, expand_to=20_000,
                                        want_stderr=False)
        assert table.max_residual() <= 1.2e-2

    def test_stream_matches_trajectory_route(self, ou_model, ou_handle):
        mu = ParticleMeasure.dirac(np.array([0.1, 0.1]))
        times = np.linspace(0.0, 0.5, 5)
        bank = default_bank(2)[:4]
        traj = evolve_measure(ou_handle, mu, times, seed=31, expand_to=500)
        t1 = measure_equation_residual(traj, bank, ou_model)
        t2 = measure_equation_stream(ou_handle, mu, times, bank,
                                     seed=31, expand_to=500)
        # identical evolution; only the reduction order differs at t = 0
        np.testing.assert_allclose(t1.residuals, t2.residuals, atol=1e-13)

    def test_stationary_pair_generator_moment_vanishes(self):
        # A = -I, Q = 2I leaves the standard Gaussian invariant
        model = build_model(-np.eye(2), 2.0 * np.eye(2))
        handle = exact_ou_handle(model, seed=77)
        mu = ParticleMeasure.gaussian(CovarianceOperator(np.eye(2)), 20_000,
                                      seed=13)
        times = np.linspace(0.0, 1.0, 9)
        table = measure_equation_stream(handle, mu, times, default_bank(2),
                                        seed=37)
        z = np.abs(table.generator_moments) / table.generator_stderr
        assert z.max() <= 3.8
        # moments stay flat: residuals at the Monte Carlo scale
        assert table.max_residual() <= 2e-2

    def test_single_point_grid_rejected(self, ou_model, ou_handle):
        mu = ParticleMeasure.dirac(np.zeros(2))
        traj = MeasureTrajectory(np.array([0.0]), (mu,))
        with pytest.raises(InputError):
            measure_equation_residual(traj, default_bank(2), ou_model)


class TestResolvent:
    def test_constant_value(self, ou_handle):
        lam = 1.3
        val, tail = resolvent_apply(ou_handle, lam, Constant(2.0), np.zeros(2))
        assert tail <= 1e-8
        assert abs(val - 2.0 / lam) <= 1e-8

    def test_norm_bound(self, ou_handle):
        rng = np.random.default_rng(41)
        lam = 0.9
        for _ in range(10):
            h = rng.standard_normal(2)
            f = CylindricalExp(h, "re")
            x = rng.standard_normal(2)
            val, _ = resolvent_apply(ou_handle, lam, f, x)
            assert abs(val) <= f.sup_bound() / lam + 1e-8

    def test_scalar_case_against_quad_oracle(self):
        model = build_model(np.array([[-0.6]]), np.array([[0.8]]))
        handle = exact_ou_handle(model)
        lam = 1.1
        h = np.array([0.9])
        x = np.array([0.4])
        val, _ = resolvent_apply(handle, lam, CylindricalExp(h, "re"), x)

        def integrand(t):
            return math.exp(-lam * t) * ou_exact_cyl(model, t, h, x).real

        ref, _ = scipy.integrate.quad(integrand, 0, 40, epsabs=1e-12, limit=400)
        assert val == pytest.approx(ref, abs=1e-6)

    def test_lambda_range_enforced(self, ou_model):
        handle = exact_ou_handle(ou_model)
        with pytest.raises(InputError):
            resolvent_apply(handle, 0.0, Constant(1.0), np.zeros(2))

    def test_function_wrapper_consistent(self, ou_model, ou_handle):
        lam = 1.2
        f = CylindricalExp(np.array([0.7, 0.1]), "im")
        rf = ResolventFunction(ou_handle, lam, f)
        rng = np.random.default_rng(43)
        X = rng.standard_normal((5, 2))
        direct = [resolvent_apply(ou_handle, lam, f, row)[0] for row in X]
        np.testing.assert_allclose(rf.value_batch(ou_model, X), direct,
                                   atol=1e-8)
        assert rf.sup_bound() >= max(abs(v) for v in direct)

    def test_weak_resolvent_identity(self, ou_model, ou_handle):
        # lambda R f - K R f = f, with K replaced by the difference quotient
        lam = 1.0
        f = CylindricalExp(np.array([0.8, -0.4]), "re")
        x = np.array([0.3, 0.2])
        rf = ResolventFunction(ou_handle, lam, f)
        delta = 1e-3
        moved = ou_apply_gh(ou_model, delta, rf, x)
        quotient = (moved - rf.value(ou_model, x)) / delta
        err = abs(lam * rf.value(ou_model, x) - quotient - f.value(ou_model, x))
        assert err <= 5e-2


class TestBackwardSolution:
    def test_terminal_condition_exact(self, ou_handle):
        phi = CylindricalExp(np.array([0.5, 0.5]), "re")
        assert backward_solution(ou_handle, phi, 1.0, 1.0, np.zeros(2)) == 0.0

    def test_constant_closed_form(self, ou_handle):
        val = backward_solution(ou_handle, Constant(3.0), 1.25, 0.5, np.zeros(2))
        assert val == pytest.approx(-(1.25 - 0.5) * 3.0, abs=1e-12)

    def test_time_lipschitz_bound(self, ou_handle):
        phi = CylindricalExp(np.array([0.9, -0.3]), "im")
        rng = np.random.default_rng(47)
        T = 1.0
        for _ in range(10):
            t, s = sorted(rng.uniform(0, T, 2))
            x = rng.standard_normal(2)
            ut = backward_solution(ou_handle, phi, T, t, x)
            us = backward_solution(ou_handle, phi, T, s, x)
            assert abs(ut - us) <= (s - t) * phi.sup_bound() + 1e-8

    def test_outside_window_rejected(self, ou_handle):
        with pytest.raises(InputError):
            backward_solution(ou_handle, Constant(1.0), 1.0, 1.5, np.zeros(2))

    def test_pde_residual(self, ou_model, ou_handle):
        # u_t + K u = phi via central differences in t and x
        phi = CylindricalExp(np.array([0.7, 0.4]), "re")
        T = 1.0
        x = np.array([0.3, -0.1])
        for t in (0.25, 0.6):
            dt = 1e-3
            up = backward_solution(ou_handle, phi, T, t + dt, x)
            dn = backward_solution(ou_handle, phi, T, t - dt, x)
            u_t = (up - dn) / (2 * dt)
            ku = kolmogorov_fd(
                lambda X: backward_solution_batch(ou_handle, phi, T, t, X),
                ou_model, x)
            assert abs(u_t + ku - phi.value(ou_model, x)) <= 1e-3


class TestBernstein:
    def test_affine_reproduced_exactly(self):
        for n in (1, 5, 40):
            for t in (0.0, 0.3, 0.5, 1.0):
                got = bernstein_approx(lambda s: 2.0 - 3.0 * s, n, t)
                assert got == pytest.approx(2.0 - 3.0 * t, abs=1e-12)

    def test_partition_of_unity(self):
        for t in np.linspace(0, 1, 11):
            assert bernstein_approx(lambda s: 1.0, 10, t) == pytest.approx(
                1.0, abs=1e-12)

    def test_square_classical_value(self):
        # direct-summation oracle and the closical identity
        # B_n(s^2)(t) = t^2 + t(1-t)/n
        got = bernstein_approx(lambda s: s * s, 10, 0.5)
        direct = sum(math.comb(10, k) * 0.5**10 * (k / 10) ** 2
                     for k in range(11))
        assert got == pytest.approx(direct, abs=1e-14)
        assert got == pytest.approx(0.275, abs=1e-12)

    def test_monotone_preserved(self):
        grid = np.linspace(0, 1, 100)
        vals = [bernstein_approx(math.tanh, 25, t) for t in grid]
        assert np.all(np.diff(vals) >= -1e-12)

    def test_domain_enforced(self):
        with pytest.raises(InputError):
            bernstein_approx(lambda s: s, 5, 1.5)


class TestCesaro:
    def test_constant_exact(self, ou_handle):
        assert cesaro_smooth(ou_handle, Constant(4.0), 3, 17, np.zeros(2)) == 4.0

    def test_riemann_rate(self, ou_model, ou_handle):
        from semilab.quadrature import gauss_legendre_rule
        phi = CylindricalExp(np.array([0.9, 0.6]), "re")
        x = np.array([0.4, 0.1])
        n1 = 2
        nodes, weights = gauss_legendre_rule(0.0, 1.0 / n1, 4, 24)
        target = n1 * float(np.sum(
            weights * semigroup_curve(ou_handle, phi, x, nodes)))
        errs = []
        sizes = [8, 16, 32, 64, 128]
        for n3 in sizes:
            errs.append(abs(cesaro_smooth(ou_handle, phi, n1, n3, x) - target))
        slope = np.polyfit(np.log(sizes), np.log(errs), 1)[0]
        assert -1.2 <= slope <= -0.8

    def test_large_n1_approaches_point_value(self, ou_model, ou_handle):
        phi = CylindricalExp(np.array([0.8, -0.2]), "im")
        x = np.array([0.2, 0.5])
        n1 = 64
        ts = np.linspace(0, 1.0 / n1, 33)
        modulus = np.max(np.abs(semigroup_curve(ou_handle, phi, x, ts)
                                - phi.value(ou_model, x)))
        got = cesaro_smooth(ou_handle, phi, n1, 64, x)
        assert abs(got - phi.value(ou_model, x)) <= modulus + 1e-12
