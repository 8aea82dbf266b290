from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from stoclaw.model import (DomainError, EntropyPair, FluxModel, InitialData, ModelValidationError,
                           NoiseModel, bump_constant, entropy_flux, entropy_pair_eval, flux_eval,
                           noise_eval, validate_model)


def _rational_example_flux(l, u):
    """((u + 1)(u - 1))^(l+1) / (l+1) and its derivative in exact arithmetic."""
    base = (u + 1) * (u - 1)
    value = base ** (l + 1) / (l + 1)
    slope = base ** l * 2 * u
    return value, slope


class TestFlux:
    def test_default_member_at_zero(self):
        f = FluxModel.example((1,))
        assert flux_eval(f, 0.0)[0] == pytest.approx(0.5, abs=1e-15)
        assert flux_eval(f, 0.0, want_derivative=True)[0] == pytest.approx(0.0, abs=1e-15)

    def test_double_root_at_lower_end(self):
        f = FluxModel.example((1,))
        assert abs(flux_eval(f, -1.0)[0]) <= 1e-15
        assert abs(flux_eval(f, -1.0, True)[0]) <= 1e-15

    def test_two_component_family_against_rational_oracle(self):
        f = FluxModel.example((1, 2))
        u = Fraction(1, 2)
        want = [_rational_example_flux(l, u) for l in (1, 2)]
        np.testing.assert_allclose(flux_eval(f, 0.5), [float(w[0]) for w in want], rtol=0, atol=1e-15)
        np.testing.assert_allclose(flux_eval(f, 0.5, True), [float(w[1]) for w in want], rtol=0, atol=1e-15)

    @given(st.fractions(min_value=-1, max_value=1, max_denominator=64), st.integers(1, 4))
    def test_family_matches_rational_oracle(self, u, l):
        f = FluxModel.example((l,))
        value, slope = _rational_example_flux(l, u)
        assert flux_eval(f, float(u))[0] == pytest.approx(float(value), abs=1e-14)
        assert flux_eval(f, float(u), True)[0] == pytest.approx(float(slope), abs=1e-13)

    def test_non_finite_state_rejected(self):
        with pytest.raises(DomainError):
            flux_eval(FluxModel.example(), float("nan"))

    def test_interval_must_sit_inside_velocity_range(self):
        with pytest.raises(DomainError):
            FluxModel.example((1,), -1.0, 1.0, L0=1.0)

    def test_max_speed_of_default_member(self):
        # sup |2u^3 - 2u| on [-1, 1] is attained at u = 1/sqrt(3)
        assert FluxModel.example().max_speed() == pytest.approx(4 / (3 * np.sqrt(3)), rel=1e-14)

    def test_callable_flux(self):
        f = FluxModel.from_callable(lambda u: np.sin(np.pi * u), lambda u: np.pi * np.cos(np.pi * u))
        assert f.A1(np.array([0.5]))[0] == pytest.approx(1.0)
        assert f.max_speed() == pytest.approx(np.pi, rel=1e-6)


class TestEntropy:
    def test_quadratic_entropy_with_linear_speed(self):
        f = FluxModel.polynomial([0.0, 0.0, 0.5])
        eta, q = entropy_pair_eval(EntropyPair.quadratic(), f, 1.0)
        assert eta == pytest.approx(0.5)
        assert q[0] == pytest.approx(1.0 / 3.0, abs=1e-15)

    @pytest.mark.parametrize("c", [2.0, -1.7])
    def test_kruzhkov_outside_the_range_is_plus_minus_flux(self, c):
        f = FluxModel.example()
        pair = EntropyPair.kruzhkov(c)
        u = np.linspace(-1, 1, 41)
        q = entropy_flux(pair, f, u)[:, 0]
        sign = np.sign(-c)  # eta' = sign(u - c) is constant on [-1, 1]
        np.testing.assert_allclose(q, sign * (f.A1(u) - f.A1(0.0)), atol=1e-14)

    def test_quartic_entropy_against_closed_form(self):
        f = FluxModel.example()
        u = 0.7
        # q(u) = int_0^u (2s^3 - 2s) 4 s^3 ds = 8/7 u^7 - 8/5 u^5
        exact = 8 / 7 * u ** 7 - 8 / 5 * u ** 5
        closed = EntropyPair.custom(lambda v: v ** 4, lambda v: 4 * v ** 3, lambda v: 12 * v ** 2,
                                    dpoly=(0, 0, 0, 4))
        generic = EntropyPair.custom(lambda v: v ** 4, lambda v: 4 * v ** 3, lambda v: 12 * v ** 2)
        assert entropy_pair_eval(closed, f, u)[1][0] == pytest.approx(exact, abs=1e-10)
        assert entropy_pair_eval(generic, f, u)[1][0] == pytest.approx(exact, abs=1e-10)

    @given(st.floats(-1, 1), st.floats(-0.9, 0.9), st.floats(1e-3, 0.2))
    def test_kruzhkov_closed_form_against_quadrature(self, u, c, delta):
        f = FluxModel.example()
        pair = EntropyPair.kruzhkov(c, delta)
        val, _ = integrate.quad(lambda s: float(f.a1(s) * pair.deta(s)), 0.0, u, epsabs=1e-13,
                                epsrel=0, limit=200, points=[c - delta, c + delta])
        assert entropy_flux(pair, f, np.array(u))[0] == pytest.approx(val, abs=1e-12)

    @given(st.floats(-1, 1), st.floats(-1, 1))
    def test_kruzhkov_entropy_is_convex_and_lipschitz(self, u, v):
        pair = EntropyPair.kruzhkov(0.1, 0.05)
        mid = pair.eta(0.5 * (u + v))
        assert mid <= 0.5 * (pair.eta(u) + pair.eta(v)) + 1e-15
        assert abs(pair.eta(u) - pair.eta(v)) <= abs(u - v) + 1e-15


class TestNoise:
    def test_vanishes_at_upper_end(self):
        g, G2 = noise_eval(NoiseModel.default(), 0.3, 1.0)
        assert np.all(g == 0.0) and G2 == 0.0

    def test_single_mode_value_matches_reimplementation(self):
        n = NoiseModel(K=1, alpha=(0.2,), M=0.5)
        g, _ = noise_eval(n, 0.0, 0.0)
        # independent bump: c (1 - s^2)^3 with c chosen so that max |d/du| = 1 on a fine grid
        u = np.linspace(-0.5, 0.5, 400_001)
        shape = (1 - (u / 0.5) ** 2) ** 3
        c = 1.0 / np.max(np.abs(np.gradient(shape, u)))
        assert bump_constant(0.5) == pytest.approx(c, rel=1e-8)
        assert g[0] == pytest.approx(0.2 / (1 + np.pi) * bump_constant(0.5), rel=1e-15)

    def test_lipschitz_bound_on_random_pairs(self, rng):
        n = NoiseModel.default()
        x, y = rng.uniform(0, 1, (2, 10_000))
        u, v = rng.uniform(-1.2, 1.2, (2, 10_000))
        lhs = np.sum((n.g(x, u) - n.g(y, v)) ** 2, axis=-1)
        assert np.all(lhs <= n.D * ((x - y) ** 2 + (u - v) ** 2) + 1e-15)

    def test_point_outside_domain(self):
        with pytest.raises(DomainError):
            noise_eval(NoiseModel.default(), 1.2, 0.0)

    def test_off_has_no_modes(self):
        assert NoiseModel.off().K == 0


class TestInitialData:
    def test_profiles(self):
        x = np.array([0.1, 0.5, 0.9])
        assert np.all(InitialData("constant", (0.3,))(x) == 0.3)
        np.testing.assert_array_equal(InitialData("step", (-0.5, 0.5, 0.5))(x), [-0.5, 0.5, 0.5])
        np.testing.assert_allclose(InitialData("cosine", (0.0, 0.5, 1.0))(x), 0.5 * np.cos(np.pi * x))
        bump = InitialData()(x)
        assert bump[1] == pytest.approx(0.8) and bump[0] == pytest.approx(-0.6)

    def test_default_stays_inside_interval(self):
        u = InitialData()(np.linspace(0, 1, 1001))
        assert u.min() >= -1 and u.max() <= 1

    def test_scaling(self):
        x = (np.arange(512) + 0.5) / 512
        s = InitialData("cosine", (0.0, 0.4, 1.0)).scaled(2.0)
        np.testing.assert_allclose(s(x), 0.8 * np.cos(np.pi * x), atol=1e-15)


class TestValidation:
    def test_default_configuration_passes(self):
        rep = validate_model(FluxModel.example(), NoiseModel.default(), InitialData())
        assert rep.passed

    def test_noise_support_must_fit(self):
        with pytest.raises(ModelValidationError, match="noise_support"):
            validate_model(FluxModel.example(), NoiseModel.default(M=1.5), InitialData())

    def test_flux_must_vanish_at_the_ends(self):
        base = FluxModel.example()
        coeffs = list(base.coeffs[0])
        coeffs[0] += 0.05
        coeffs[1] += 0.05  # adds 0.05 (1 + u), so A(1) = 0.1
        bad = FluxModel.polynomial(coeffs)
        assert bad.A1(1.0) == pytest.approx(0.1)
        with pytest.raises(ModelValidationError, match="flux_endpoint"):
            validate_model(bad, NoiseModel.default(), InitialData())

    def test_report_without_raising(self):
        rep = validate_model(FluxModel.example(), NoiseModel.default(M=1.5), raise_on_fail=False)
        assert not rep.passed
        assert any("FAIL" in line for line in rep.lines())
