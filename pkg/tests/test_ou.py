import math

import numpy as np
import pytest
import scipy.linalg

from semilab.errors import InputError
from semilab.model import build_model
from semilab.operators import covariance_Qt
from semilab.ou import (
    gaussian_quadrature_mean,
    ou_apply,
    ou_apply_gh,
    ou_exact_apply,
    ou_exact_cyl,
    ou_shift_identity_check,
)
from semilab.testfunctions import Constant, CylindricalExp, OUIntegralFunction


@pytest.fixture(scope="module")
def model2():
    A = np.array([[-0.7, 0.4], [0.0, -1.1]])
    Q = np.array([[0.5, 0.1], [0.1, 0.3]])
    return build_model(A, Q)


def random_cyl_setup(rng, model, h_cap=1.2):
    d = model.dim
    h = rng.standard_normal(d)
    h *= rng.uniform(0.3, h_cap) / np.linalg.norm(h)
    x = rng.standard_normal(d)
    t = rng.uniform(0.05, 1.5)
    return t, h, x


class TestExactCylindrical:
    def test_identity_at_zero_time(self, model2):
        h = np.array([0.9, -0.2])
        x = np.array([0.1, 0.7])
        got = ou_exact_cyl(model2, 0.0, h, x)
        assert got == pytest.approx(np.exp(1j * (x @ h)), abs=1e-14)

    def test_scalar_brownian_case(self):
        # A=0, Q=1: C(t) = t, so at t=2, h=1, x=0 the value is e^{-1}
        model = build_model(np.zeros((1, 1)), np.eye(1))
        got = ou_exact_cyl(model, 2.0, np.array([1.0]), np.array([0.0]))
        assert got == pytest.approx(complex(math.exp(-1.0), 0.0), abs=1e-12)
        # Monte Carlo oracle over N(0, 2)
        val, se = ou_apply(model, 2.0, CylindricalExp(np.array([1.0]), "re"),
                           np.array([0.0]), 200_000, seed=5)
        assert abs(val - math.exp(-1.0)) < 3 * se

    def test_matches_monte_carlo(self, model2):
        rng = np.random.default_rng(17)
        fails = 0
        for trial in range(40):
            t, h, x = random_cyl_setup(rng, model2)
            z = ou_exact_cyl(model2, t, h, x)
            for part, want in (("re", z.real), ("im", z.imag)):
                val, se = ou_apply(model2, t, CylindricalExp(h, part), x,
                                   20_000, seed=100 + trial)
                fails += abs(val - want) > 3 * max(se, 1e-12)
        assert fails <= 4

    def test_matches_gauss_hermite(self, model2):
        rng = np.random.default_rng(19)
        for trial in range(10):
            t, h, x = random_cyl_setup(rng, model2)
            z = ou_exact_cyl(model2, t, h, x)
            got = ou_apply_gh(model2, t, CylindricalExp(h, "re"), x)
            assert got == pytest.approx(z.real, abs=1e-6)

    def test_semigroup_law_through_closed_form(self, model2):
        # value at t+s equals the s-propagated frequency evaluated at the
        # t-flowed point, with covariances composing additively
        rng = np.random.default_rng(23)
        for _ in range(25):
            t, h, x = random_cyl_setup(rng, model2)
            s = rng.uniform(0.05, 1.0)
            direct = ou_exact_cyl(model2, t + s, h, x)
            # the frequency propagates by e^{sA^T}
            hs = scipy.linalg.expm(s * model2.A.entries.T) @ h
            qs = h @ (covariance_Qt(model2.A, model2.Q, s).entries @ h)
            composed = np.exp(-0.5 * qs) * ou_exact_cyl(model2, t, hs, x)
            assert abs(direct - composed) < 1e-10

    def test_negative_time_rejected(self, model2):
        with pytest.raises(InputError):
            ou_exact_cyl(model2, -0.1, np.ones(2), np.zeros(2))


class TestMonteCarloApply:
    def test_zero_time_returns_point_value(self, model2):
        phi = OUIntegralFunction(0.8, np.array([0.5, 0.2]), "re")
        x = np.array([0.3, -0.4])
        val, se = ou_apply(model2, 0.0, phi, x, 100, seed=1)
        assert se == 0.0
        assert val == pytest.approx(phi.value(model2, x), abs=1e-12)

    def test_constant_exact(self, model2):
        val, se = ou_apply(model2, 0.7, Constant(2.5), np.zeros(2), 50, seed=2)
        assert val == 2.5 and se == 0.0

    def test_contraction(self, model2):
        rng = np.random.default_rng(29)
        for trial in range(20):
            t, h, x = random_cyl_setup(rng, model2)
            a = rng.uniform(0.3, 1.0)
            phi = OUIntegralFunction(a, h, "im")
            val, se = ou_apply(model2, t, phi, x, 5_000, seed=300 + trial)
            assert abs(val) <= phi.sup_bound() + 3 * se

    def test_seed_determinism(self, model2):
        phi = CylindricalExp(np.array([0.9, 0.1]), "re")
        x = np.zeros(2)
        a = ou_apply(model2, 0.5, phi, x, 1000, seed=11, stream=3)
        b = ou_apply(model2, 0.5, phi, x, 1000, seed=11, stream=3)
        assert a == b

    def test_degenerate_covariance_direction(self):
        model = build_model(np.zeros((2, 2)), np.diag([1.0, 0.0]))
        phi = CylindricalExp(np.array([0.0, 1.0]), "re")
        x = np.array([0.0, 0.4])
        # noise never enters the second coordinate
        val, se = ou_apply(model, 1.0, phi, x, 500, seed=3)
        assert val == pytest.approx(math.cos(0.4), abs=1e-12)
        got = ou_apply_gh(model, 1.0, phi, x)
        assert got == pytest.approx(math.cos(0.4), abs=1e-12)

    def test_gh_rejects_high_dimension(self):
        model = build_model(-np.eye(4), np.eye(4))
        with pytest.raises(InputError):
            ou_apply_gh(model, 0.5, CylindricalExp(np.ones(4), "re"), np.zeros(4))


class TestWindowShiftIdentity:
    def test_trivial_flow(self):
        model = build_model(np.zeros((2, 2)), np.zeros((2, 2)))
        res = ou_shift_identity_check(model, 0.4, 0.8, np.array([0.7, -0.1]),
                                      np.array([0.2, 0.5]))
        assert res < 1e-12

    def test_generic_instances(self, model2):
        rng = np.random.default_rng(31)
        for _ in range(8):
            a = rng.uniform(0.2, 1.0)
            t = rng.uniform(0.1, 0.8)
            h = rng.standard_normal(2)
            h *= rng.uniform(0.3, 1.0) / np.linalg.norm(h)
            x = rng.standard_normal(2) * 0.8
            assert ou_shift_identity_check(model2, t, a, h, x) <= 1e-8

    def test_short_time_limit(self, model2):
        h = np.array([0.6, 0.3])
        x = np.array([0.2, -0.1])
        res = ou_shift_identity_check(model2, 1e-4, 0.7, h, x)
        assert res <= 1e-8

    def test_invalid_inputs(self, model2):
        with pytest.raises(InputError):
            ou_shift_identity_check(model2, 0.0, 1.0, np.ones(2), np.zeros(2))


class TestExactApplyDispatch:
    def test_integral_function_route_matches_quadrature(self, model2):
        rng = np.random.default_rng(37)
        for _ in range(5):
            a = rng.uniform(0.3, 1.0)
            h = rng.standard_normal(2)
            h *= 0.8 / np.linalg.norm(h)
            x = rng.standard_normal(2) * 0.6
            t = rng.uniform(0.1, 0.6)
            phi = OUIntegralFunction(a, h, "im")
            exact = ou_exact_apply(model2, t, phi, x)
            quad = ou_apply_gh(model2, t, phi, x, tol=1e-11)
            assert exact == pytest.approx(quad, abs=1e-8)

    def test_constant_and_zero_time(self, model2):
        assert ou_exact_apply(model2, 0.9, Constant(-1.5), np.zeros(2)) == -1.5
        phi = CylindricalExp(np.array([1.0, 0.0]), "re")
        assert ou_exact_apply(model2, 0.0, phi, np.array([0.5, 0.0])) == \
            pytest.approx(math.cos(0.5), abs=1e-14)

    def test_complex_quadrature_mean(self, model2):
        # E[exp(i<y, v>)] for y ~ N(0, C) is exp(-<Cv, v>/2)
        C = covariance_Qt(model2.A, model2.Q, 0.8).entries
        v = np.array([0.7, -0.4])
        got = gaussian_quadrature_mean(
            model2, np.zeros(2), C, lambda pts: np.exp(1j * (pts @ v)))
        assert got == pytest.approx(np.exp(-0.5 * v @ (C @ v)), abs=1e-10)
