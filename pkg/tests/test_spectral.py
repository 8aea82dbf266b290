import math

import numpy as np
import pytest
from scipy.integrate import trapezoid
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from stoclaw import spectral
from stoclaw.model import DomainError
from stoclaw.solver import standard_normals, mean_and_se
from stoclaw.spectral import SpectralField, SpectralPath


def _fd_heat_neumann(u, eps, T, flux_left=None, flux_right=None, times=None):
    """Cell-centred explicit finite-volume heat solver with prescribed boundary fluxes.

    ``flux_left(t)`` is -eps u_x(0) and ``flux_right(t)`` is eps u_x(1); both are
    added as sources into the end cells.
    """
    N = len(u)
    dx = 1.0 / N
    dt = 0.2 * dx * dx / eps
    n = int(math.ceil(T / dt))
    dt = T / n
    u = u.astype(float).copy()
    for j in range(n):
        t = j * dt
        F = np.zeros(N + 1)
        F[1:-1] = -eps * np.diff(u) / dx
        if flux_left is not None:
            F[0] = flux_left(t)
            F[-1] = -flux_right(t)
        u -= dt / dx * (F[1:] - F[:-1])
    return u


class TestTransforms:
    @given(arrays(float, st.integers(8, 64), elements=st.floats(-5, 5)))
    def test_round_trip_and_parseval(self, h):
        c = spectral.to_modes(h)
        np.testing.assert_allclose(spectral.to_grid(c), h, atol=1e-12)
        assert np.sum(c * c) == pytest.approx(np.sum(h * h) / len(h), rel=1e-12, abs=1e-12)

    def test_mode_evaluates_to_basis(self):
        x = np.linspace(0, 1, 7)
        f = SpectralField.mode(3, 8)
        np.testing.assert_allclose(f.evaluate(x), math.sqrt(2) * np.cos(3 * np.pi * x), atol=1e-14)


class TestSemigroup:
    def test_identity_at_zero(self, rng):
        h = SpectralField(rng.standard_normal(32))
        np.testing.assert_array_equal(spectral.semigroup_apply(h, 0.0, 0.1).coeffs, h.coeffs)

    def test_kernel_mode_unchanged(self):
        h = SpectralField.mode(0, 16, 2.5)
        for t in (0.1, 1.0, 10.0):
            np.testing.assert_array_equal(spectral.semigroup_apply(h, t, 0.3).coeffs, h.coeffs)

    def test_first_mode_against_finite_differences(self):
        eps, T, N = 0.01, 1.0, 400
        x = (np.arange(N) + 0.5) / N
        h = SpectralField.mode(1, N)
        out = spectral.semigroup_apply(h, T, eps)
        assert out.coeffs[1] == pytest.approx(math.exp(-eps * math.pi ** 2), rel=1e-15)
        fd = _fd_heat_neumann(h.grid(N), eps, T)
        assert np.max(np.abs(fd - out.grid(N))) <= 1e-4

    def test_negative_time_rejected(self):
        with pytest.raises(DomainError):
            spectral.semigroup_apply(SpectralField.mode(1, 4), -1.0, 0.1)


class TestNorms:
    def test_kernel_mode_norm_is_one(self):
        for alpha in (-0.5, 0.0, 0.5, 2.0):
            assert spectral.ha_norm(SpectralField.mode(0, 8), alpha) == pytest.approx(1.0)

    def test_single_mode(self):
        assert spectral.ha_norm(SpectralField.mode(2, 8), 0.5) == pytest.approx(math.sqrt(1 + 4 * math.pi ** 2))

    def test_h1_norm_against_grid_quadrature(self, rng):
        h = SpectralField(rng.standard_normal(24) / (1 + np.arange(24)) ** 2)
        x = np.linspace(0, 1, 200_001)
        v = h.evaluate(x)
        dv = np.gradient(v, x)
        quad = trapezoid(v * v, x) + trapezoid(dv * dv, x)
        assert spectral.ha_norm(h, 0.5) ** 2 == pytest.approx(quad, rel=0.01)

    @given(arrays(float, 32, elements=st.floats(-1, 1)), st.floats(1e-3, 1.0), st.floats(1e-3, 2.0))
    def test_smoothing_inequality(self, c, eps, T):
        h = SpectralField(c)
        lhs = spectral.smoothing_integral(h, T, eps)
        assert lhs <= np.sum(c[1:] ** 2) / (2 * eps) * (1 + 1e-12) + 1e-300


class TestDuhamel:
    def test_constant_kernel_forcing(self):
        t = np.linspace(0, 2, 21)
        vals = np.zeros((20, 4))
        vals[:, 0] = 1.5
        out = spectral.duhamel(SpectralPath(t, vals), 0.1)
        np.testing.assert_allclose(out.values[:, 0], 1.5 * t, rtol=1e-14)

    def test_first_mode_closed_form(self):
        eps, lam = 0.05, math.pi ** 2
        t = np.linspace(0, 1, 33)
        vals = np.zeros((32, 3))
        vals[:, 1] = 1.0
        out = spectral.duhamel(SpectralPath(t, vals), eps)
        np.testing.assert_allclose(out.values[:, 1], -np.expm1(-eps * lam * t) / (eps * lam), rtol=1e-13)

    @given(st.integers(0, 2 ** 31))
    def test_l2_bound(self, seed):
        rng = np.random.default_rng(seed)
        T, steps = 1.3, 64
        t = np.linspace(0, T, steps + 1)
        vals = rng.standard_normal((steps, 16))
        out = spectral.duhamel(SpectralPath(t, vals), 0.02)
        sq = np.sum(out.values ** 2, axis=-1)
        dt = T / steps
        lhs = dt * (np.sum(sq[1:-1]) + 0.5 * sq[-1])  # trapezoid, value 0 at t = 0
        rhs = T ** 2 / 2 * dt * np.sum(vals ** 2)
        assert lhs <= rhs * (1 + 1e-12)

    def test_gain_is_cap_independent_and_bounds_random_forcing(self, rng):
        t = np.linspace(0, 1, 65)
        gains = spectral.duhamel_gain(256, t, 0.01)
        caps = [gains[:c].max() for c in (64, 128, 256)]
        assert (max(caps) - min(caps)) / min(caps) <= 0.05
        vals = rng.standard_normal((64, 256))
        out = spectral.duhamel(SpectralPath(t, vals), 0.01)
        num = np.sum(spectral.ha_norm(SpectralField(out.values[1:]), 1.0) ** 2)
        den = np.sum(vals ** 2)
        assert math.sqrt(num / den) <= caps[-1] * (1 + 1e-12)

    def test_gain_needs_uniform_steps(self):
        with pytest.raises(DomainError):
            spectral.duhamel_gain(4, [0.0, 0.1, 0.3], 0.1)


class TestStochasticConvolution:
    def test_zero_operator(self, rng):
        t = np.linspace(0, 1, 11)
        out = spectral.stochastic_convolution(SpectralPath(t, np.zeros((10, 4, 2))),
                                              rng.standard_normal((10, 2)), 0.1)
        assert np.all(out.values == 0.0)

    def test_ito_variance(self):
        eps, T, steps, paths = 0.05, 1.0, 50, 4000
        t = np.linspace(0, T, steps + 1)
        psi = np.zeros((steps, paths, 2, 1))
        psi[:, :, 1, 0] = 1.0
        inc = np.stack([standard_normals(7, p, 0, 0, steps) for p in range(paths)], axis=1)[..., None]
        inc *= math.sqrt(T / steps)
        out = spectral.stochastic_convolution(SpectralPath(t, psi), inc, eps)
        sq = out.values[-1, :, 1] ** 2
        lam = math.pi ** 2
        # left-point freezing gives the discrete sum of exp(-2 eps lam (T - t_i)) dt
        dt = T / steps
        discrete = float(np.sum(np.exp(-2 * eps * lam * (T - t[:-1]))) * dt)
        m, se = mean_and_se(sq)
        assert abs(m - discrete) <= 3 * se
        exact = -math.expm1(-2 * eps * lam * T) / (2 * eps * lam)
        assert abs(m - exact) <= 3 * se + abs(discrete - exact)

    def test_smoothing_gain_bound(self, rng):
        eps, T, steps, paths, modes = 0.05, 1.0, 40, 256, 32
        t = np.linspace(0, T, steps + 1)
        dt = T / steps
        base = rng.standard_normal((steps, modes, 2)) / (1 + np.arange(modes))[:, None]
        psi = np.broadcast_to(base[:, None], (steps, paths, modes, 2))
        inc = np.stack([np.stack([standard_normals(3, p, k, 0, steps) for k in range(2)], -1)
                        for p in range(paths)], axis=1) * math.sqrt(dt)
        out = spectral.stochastic_convolution(SpectralPath(t, psi), inc, eps)
        lam = spectral.eigenvalues(modes)
        lhs = dt * np.sum((1 + lam) * out.values[1:] ** 2, axis=(0, 2))  # per path
        # sum_{m>=1} exp(-2 eps lam m dt) dt, the discrete variance kernel; T for the kernel mode
        z = 2 * eps * lam[1:] * dt
        kernel = np.concatenate([[T], dt * np.exp(-z) / -np.expm1(-z)])
        C2 = np.max((1 + lam) * kernel)
        rhs = C2 * dt * np.sum(base ** 2)
        m, se = mean_and_se(lhs)
        assert m <= rhs + 3 * se


class TestBoundaryCorrector:
    def test_zero_data(self):
        t = np.linspace(0, 1, 11)
        out = spectral.boundary_corrector(t, np.zeros(10), np.zeros(10), 0.1, 8)
        assert np.all(out.values == 0.0)

    def test_kernel_mode_grows_linearly(self):
        t = np.linspace(0, 1, 11)
        out = spectral.boundary_corrector(t, np.zeros(10), np.full(10, 0.7), 0.1, 8)
        np.testing.assert_allclose(out.values[:, 0], 0.7 * t, rtol=1e-14)

    def test_time_varying_data_against_finite_differences(self):
        eps, T, steps, N = 0.05, 0.5, 200, 400
        t = np.linspace(0, T, steps + 1)
        left = 0.3 * np.sin(2 * np.pi * t[:-1])
        right = 0.5 * np.cos(3 * t[:-1])
        out = spectral.boundary_corrector(t, left, right, eps, N)
        w = spectral.to_grid(out.values[-1], N)

        def step_value(arr):
            return lambda s: arr[min(int(s / (T / steps) + 1e-9), steps - 1)]

        fd = _fd_heat_neumann(np.zeros(N), eps, T, step_value(left), step_value(right))
        assert math.sqrt(np.mean((w - fd) ** 2)) <= 1e-3
