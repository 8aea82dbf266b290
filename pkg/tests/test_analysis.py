import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stoclaw import analysis
from stoclaw.analysis import Cutoff, TestFunction
from stoclaw.model import DomainError, EntropyPair, FluxModel, InitialData, NoiseModel
from stoclaw.solver import (NumericalFlux, SolverConfig, StepPlan, TrajectoryRecord, sample_increments, simulate,
                            zero_path)

FLUX = FluxModel.example()
NOISE = NoiseModel.default()
OFF = NoiseModel.off()
EDGES = analysis.xi_edges(FLUX, 64)


def _run(u0, cfg, noise=NOISE, R=1, seed=0, **kw):
    plan = cfg.plan(FLUX)
    path = sample_increments(noise, plan, seed, range(R)) if noise.K else zero_path(plan, R)
    return simulate(u0, cfg, FLUX, noise, path, **kw)


def _frozen(values, T=1.0, steps=10):
    """A trajectory whose state never changes (for diagnostics on prescribed fields)."""
    values = np.asarray(values, dtype=float)
    N = values.shape[-1]
    cfg = SolverConfig(N=N, T=T, n_snapshots=steps)
    plan = StepPlan(T / steps, steps, steps)
    states = np.broadcast_to(values, (steps + 1, 1, N)).copy()
    series = {k: np.zeros((steps + 1, 1)) for k in ("mass", "l2", "min", "max", "grad_energy")}
    return TrajectoryRecord(cfg, plan, values, zero_path(plan), series, states.copy(), states)


class TestKineticFunction:
    @pytest.mark.parametrize("u", [0.5, -0.3, 0.0])
    def test_profile_integrates_to_state(self, u):
        g = analysis.chi_profile(u, EDGES)
        assert g @ np.diff(EDGES) == pytest.approx(u, abs=1e-15)

    def test_positive_state_shape(self):
        e = np.linspace(-1, 1, 21)
        g = analysis.chi_profile(0.5, e)
        centers = 0.5 * (e[1:] + e[:-1])
        np.testing.assert_allclose(g, np.where((centers > 0) & (centers < 0.5), 1.0, 0.0), atol=1e-15)

    def test_negative_state_shape(self):
        e = np.linspace(-1, 1, 21)
        g = analysis.chi_profile(-0.3, e)
        centers = 0.5 * (e[1:] + e[:-1])
        np.testing.assert_allclose(g, np.where((centers > -0.3) & (centers < 0), -1.0, 0.0), atol=1e-15)

    def test_zero_state(self):
        assert np.all(analysis.chi_profile(0.0, EDGES) == 0.0)

    @given(st.floats(-1, 1))
    def test_exact_profile_has_zero_distance(self, v):
        res = analysis.chi_function_distance(analysis.chi_profile(np.array([v]), EDGES), EDGES)
        assert res.is_chi and res.state[0] == pytest.approx(v, abs=1e-14)

    @given(st.floats(-1, 1).filter(lambda v: abs(v) > 1e-3))
    def test_half_profile(self, v):
        e = np.linspace(-1.05, 1.05, 2101)
        res = analysis.chi_function_distance(0.5 * analysis.chi_profile(np.array([v]), e), e)
        assert not res.is_chi
        assert res.distance[0] == pytest.approx(0.5 * abs(v), abs=2e-3)

    def test_mixture_against_brute_force(self):
        e = np.linspace(-1, 1, 21)  # 0.2, 0.5 and 0.8 are bin edges
        g = 0.5 * (analysis.chi_profile(0.2, e) + analysis.chi_profile(0.8, e))
        res = analysis.chi_function_distance(g[None], e)
        v = 0.5
        brute = 0.0
        for j in range(len(e) - 1):
            lo, hi = e[j], e[j + 1]
            inside = (max(0.0, min(v, hi) - max(0.0, lo))) / (hi - lo)  # chi(0.5) bin average
            brute += abs(g[j] - inside) * (hi - lo)
        assert res.distance[0] == pytest.approx(brute, abs=1e-14)
        assert res.distance[0] == pytest.approx(0.3, abs=1e-12)


class TestKineticMeasure:
    def test_constant_trajectory(self):
        traj = _run(InitialData("constant", (1.0,)), SolverConfig(N=40, T=0.1), OFF, keep_states=True)
        h = analysis.kinetic_measure(traj, FLUX)
        assert h.total == 0.0

    def test_mass_equals_dissipation(self):
        traj = _run(InitialData(), SolverConfig(N=50, T=0.2), R=3,
                    observers=[analysis.KineticObserver(FLUX)])
        h = traj.extra["kinetic"]
        acc = analysis.accumulated_dissipation(traj)
        np.testing.assert_allclose(h.per_replica, acc, rtol=1e-12)
        assert h.total == pytest.approx(np.mean(acc), rel=1e-12)

    def test_streamed_equals_post_hoc(self):
        traj = _run(InitialData(), SolverConfig(N=50, T=0.2), R=2, keep_states=True,
                    observers=[analysis.KineticObserver(FLUX)])
        post = analysis.kinetic_measure(traj, FLUX)
        np.testing.assert_array_equal(post.mass, traj.extra["kinetic"].mass)

    def test_support_inside_state_interval(self):
        traj = _run(InitialData(), SolverConfig(N=50, T=0.2), R=4, observers=[analysis.KineticObserver(FLUX)])
        h = traj.extra["kinetic"]
        k = np.nonzero(h.marginal_xi() > 0)[0]
        assert len(k) and h.xi_edges[k.min() + 1] > FLUX.a_lo and h.xi_edges[k.max()] < FLUX.b_hi
        assert h.outside == 0 and np.all(h.mass >= 0)

    def test_bins_must_cover_interval(self):
        with pytest.raises(DomainError):
            analysis.KineticObserver(FLUX, edges=np.linspace(-0.5, 0.5, 11))


class TestWeakForms:
    def test_xi_independent_kinetic_equals_conservation(self):
        traj = _run(InitialData(), SolverConfig(N=100), R=2, seed=4, keep_states=True)
        test = TestFunction(0.5)
        kin = analysis.weak_form_residual(traj, "kinetic", test, FLUX, NOISE)
        con = analysis.weak_form_residual(traj, "conservation", test, FLUX, NOISE)
        np.testing.assert_allclose(kin, con, rtol=0, atol=1e-12)

    def test_refinement_of_kinetic_residual(self):
        test = TestFunction(0.5, xi_coeffs=(1.0, 0.5, -0.7))
        res = []
        for N in (100, 200, 400):
            traj = _run(InitialData(), SolverConfig(N=N), OFF, keep_states=True)
            res.append(float(analysis.weak_form_residual(traj, "kinetic", test, FLUX, OFF)[0]))
        slope = np.polyfit(np.log([1 / 100, 1 / 200, 1 / 400]), np.log(res), 1)[0]
        assert slope >= 0.8

    def test_entropy_defect_is_non_negative_on_shock(self):
        traj = _run(InitialData("step", (0.8, -0.8, 0.5)), SolverConfig(N=200, eps=1e-3, T=0.3), OFF,
                    keep_states=True)
        test = TestFunction(0.3, width=0.4)
        for c in (-0.5, 0.0, 0.3):
            d = analysis.weak_form_residual(traj, "entropy", test, FLUX, OFF, EntropyPair.kruzhkov(c))
            assert d[0] >= -1e-8

    def test_scheme_entropy_flux_is_window_average(self, rng):
        nf = NumericalFlux(FLUX)
        eps, dx = 1e-3, 1e-2
        pair = EntropyPair.kruzhkov(0.1, 0.05)
        u = rng.uniform(-1, 1, (3, 20))
        u[0, :5] = np.linspace(0.06, 0.14, 5)  # states inside the smoothing window
        q = analysis.kruzhkov_scheme_entropy_flux(nf, eps, dx, pair, u)
        ks = 0.05 + (np.arange(4000) + 0.5) / 4000 * 0.1
        left, right = u[:, :-1], u[:, 1:]

        def total(a, b):
            return nf.pair(a, b) - eps * (b - a) / dx

        brute = np.mean([total(np.maximum(left, k), np.maximum(right, k)) -
                         total(np.minimum(left, k), np.minimum(right, k)) for k in ks], axis=0)
        assert np.max(np.abs(q - brute)) <= 1e-6

    def test_compact_support_required(self):
        traj = _run(InitialData(), SolverConfig(N=40, T=0.1), OFF, keep_states=True)
        with pytest.raises(DomainError):
            analysis.weak_form_residual(traj, "kinetic", TestFunction(0.1, "cosine"), FLUX, OFF)

    def test_cell_integrals_exact(self):
        f = np.linspace(0, 1, 41)
        for test in (TestFunction(1.0), TestFunction(1.0, "cosine", freq=2), TestFunction(1.0, "constant")):
            fine = np.linspace(0, 1, 400_001)
            vals = test.psi(fine)
            cum = np.concatenate([[0.0], np.cumsum(0.5 * (vals[1:] + vals[:-1]) * np.diff(fine))])
            np.testing.assert_allclose(test.cell_integrals(f), np.diff(cum[::10_000]), atol=1e-10)


class TestMass:
    def test_noise_off_drift(self):
        traj = _run(InitialData(), SolverConfig(), OFF)
        assert np.max(np.abs(traj.series["mass"] - traj.series["mass"][0])) <= 1e-13

    def test_increment_identity(self):
        traj = _run(InitialData(), SolverConfig(N=50), R=2, keep_states=True)
        assert np.max(analysis.mass_increment_defect(traj, NOISE)) <= 1e-13

    def test_mean_drift_within_three_standard_errors(self):
        traj = _run(InitialData(), SolverConfig(N=50), R=256, seed=2)
        ms = analysis.mass_series(traj)
        assert abs(ms.mean_drift) <= 3 * ms.se


class TestComparison:
    def test_identical_runs(self):
        a = _run(InitialData(), SolverConfig(N=40), R=2, keep_states=True)
        pp = analysis.positive_part_series(a, a)
        assert np.all(pp.values == 0.0) and pp.violations == 0

    def test_ordered_data_reduces_to_mass_difference(self):
        cfg = SolverConfig(N=60)
        a = _run(InitialData("cosine", (0.3, 0.2, 1.0)), cfg, OFF, keep_states=True)
        b = _run(InitialData("cosine", (-0.3, 0.2, 2.0)), cfg, OFF, keep_states=True)
        pp = analysis.positive_part_series(a, b)
        np.testing.assert_allclose(pp.values, np.broadcast_to(pp.values[0], pp.values.shape), atol=1e-13)

    def test_crossing_data_never_increases(self):
        cfg = SolverConfig(N=24)
        a = _run(InitialData("step", (0.6, -0.4, 0.5)), cfg, OFF, keep_states=True)
        b = _run(InitialData("cosine", (0.0, 0.5, 1.0)), cfg, OFF, keep_states=True)
        pp = analysis.positive_part_series(a, b, tol=1e-12)
        assert pp.violations == 0 and pp.values[0, 0] > pp.values[-1, 0]

    def test_different_paths_rejected(self):
        a = _run(InitialData(), SolverConfig(N=40), seed=1)
        b = _run(InitialData(), SolverConfig(N=40), seed=2)
        with pytest.raises(ValueError):
            analysis.positive_part_series(a, b)


class TestTrace:
    def test_constant_field(self):
        traj = _frozen(np.full(64, 0.3))
        tr = analysis.strong_trace(traj, np.array([8, 4, 2]) / 64)
        assert np.all(tr.distances_left == 0) and np.all(tr.distances_right == 0)
        np.testing.assert_allclose(tr.trace_left, 0.3, atol=1e-15)

    def test_linear_profile(self):
        N = 64
        x = (np.arange(N) + 0.5) / N
        traj = _frozen(x, T=1.0)
        depths = np.array([8, 4, 2]) / N
        tr = analysis.strong_trace(traj, depths)
        np.testing.assert_allclose(tr.left[:, 0, 0], depths, atol=1e-15)
        np.testing.assert_allclose(tr.right[:, 0, 0], 1 - depths, atol=1e-15)
        np.testing.assert_allclose(tr.distances_left[:, 0], -np.diff(depths) * 1.0, atol=1e-14)
        np.testing.assert_allclose(tr.trace_left, 0.0, atol=1e-14)

    def test_depths_validated(self):
        traj = _frozen(np.zeros(32))
        with pytest.raises(DomainError):
            analysis.strong_trace(traj, [2 / 32, 4 / 32])
        with pytest.raises(DomainError):
            analysis.strong_trace(traj, [4 / 32, 0.5 / 32])

    def test_default_run_layers_converge(self):
        cfg = SolverConfig()
        depths = np.array([8, 4, 2]) / cfg.N
        traj = _run(InitialData(), cfg, OFF, observers=[analysis.LayerObserver(depths)])
        tr = analysis.strong_trace(traj, depths)
        assert tr.cauchy_left.all() and tr.cauchy_right.all()

    def test_time_distance_on_different_grids(self):
        t1, t2 = np.linspace(0, 1, 5), np.linspace(0, 1, 3)
        d = analysis.l1_time_distance(t1, np.ones(5), t2, np.zeros(3), 1.0)
        assert d == pytest.approx(1.0)


class TestRegularity:
    def test_zero_field(self):
        assert analysis.sobolev_slobodeckij(np.zeros(50), 0.02, 1.5, Cutoff())[()] == 0.0

    def test_linear_field_against_double_sum(self):
        N, s, r = 60, 0.3, 1.5
        x = (np.arange(N) + 0.5) / N
        cut = Cutoff()
        w = cut(x) * x
        X, Y = np.meshgrid(x, x, indexing="ij")
        W1, W2 = np.meshgrid(w, w, indexing="ij")
        off = X != Y
        semi = np.sum(np.abs(W1 - W2)[off] ** r / np.abs(X - Y)[off] ** (1 + s * r)) / N ** 2
        want = (np.sum(np.abs(w) ** r) / N + semi) ** (1 / r)
        got = analysis.sobolev_slobodeckij(x, s, r, cut)
        assert got == pytest.approx(want, rel=1e-12)

    @given(st.floats(-3, 3).filter(lambda c: c == 0 or abs(c) > 1e-100))
    def test_homogeneous(self, c):
        x = (np.arange(40) + 0.5) / 40
        base = analysis.sobolev_slobodeckij(np.sin(5 * x), 0.1, 1.2, Cutoff())
        assert analysis.sobolev_slobodeckij(c * np.sin(5 * x), 0.1, 1.2, Cutoff()) == \
            pytest.approx(abs(c) * base, rel=1e-12, abs=1e-300)

    def test_cutoff_must_be_interior(self):
        with pytest.raises(DomainError):
            Cutoff(0.5, 0.5)

    def test_coarsen(self):
        u = np.arange(12.0)
        np.testing.assert_array_equal(analysis.coarsen(u, 4), [1, 4, 7, 10])
        with pytest.raises(ValueError):
            analysis.coarsen(u, 5)

    def test_holder_frozen_field(self):
        traj = _frozen(np.cos(np.pi * (np.arange(32) + 0.5) / 32))
        assert np.all(analysis.holder_time_seminorm(traj, 0.25) == 0.0)

    def test_holder_stable_under_mode_truncation(self):
        flux0 = FluxModel.polynomial([0.0])
        cfg = SolverConfig(N=128, T=0.5)
        plan = cfg.plan(flux0)
        traj = simulate(InitialData(), cfg, flux0, OFF, zero_path(plan))
        vals = [float(analysis.holder_time_seminorm(traj, 0.25, n_modes=m)[0]) for m in (32, 64, 128)]
        assert abs(vals[1] - vals[2]) / vals[2] <= 0.01
        assert abs(vals[0] - vals[2]) >= abs(vals[1] - vals[2])

    def test_holder_exponent_range(self):
        with pytest.raises(DomainError):
            analysis.holder_time_seminorm(_frozen(np.zeros(16)), 0.6)
