"""Diagnostics computed from trajectories: kinetic functions and measures, weak-form
residuals, mass and comparison series, boundary traces and regularity norms."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial

from . import spectral
from .model import DomainError, EntropyPair, FluxModel, NoiseModel, entropy_flux
from .solver import NumericalFlux, TrajectoryRecord, tree_mean, mean_and_se


# ------------------------------------------------------------ kinetic functions


def xi_edges(flux: FluxModel, n_bins: int = 256, margin: float = 0.05) -> np.ndarray:
    """Uniform velocity bins over [a_lo - margin, b_hi + margin]."""
    return np.linspace(flux.a_lo - margin, flux.b_hi + margin, n_bins + 1)


def f_indicator(u, edges) -> np.ndarray:
    """Bin averages of 1_{u > xi}; shape u.shape + (n_bins,)."""
    e = np.asarray(edges, dtype=float)
    u = np.asarray(u, dtype=float)[..., None]
    return np.clip((u - e[:-1]) / np.diff(e), 0.0, 1.0)


def chi_profile(u, edges) -> np.ndarray:
    """Bin averages of chi(u; xi) = 1_{xi < u} - 1_{xi < 0}.

    Integrating the profile against the bin widths returns u exactly whenever
    u and 0 lie inside the grid.
    """
    return f_indicator(u, edges) - f_indicator(0.0, edges)


@dataclass(frozen=True)
class ChiDistance:
    distance: np.ndarray  # per point
    state: np.ndarray  # v = int g dxi per point
    total: float
    is_chi: bool


def chi_function_distance(g, edges, tol: float = 1e-10, weights=None) -> ChiDistance:
    """L1 distance of a profile g (points x xi-bins) to the kinetic function of its own integral."""
    g = np.asarray(g, dtype=float)
    h = np.diff(np.asarray(edges, dtype=float))
    v = g @ h
    dist = np.abs(g - chi_profile(v, edges)) @ h
    w = np.ones(dist.shape) if weights is None else np.broadcast_to(weights, dist.shape)
    total = float(np.sum(w * dist))
    return ChiDistance(dist, v, total, total <= tol)


# -------------------------------------------------------------- kinetic measure


@dataclass(frozen=True)
class KineticHistogram:
    """Binned m = eps |u_x|^2 delta(u = xi); ``mass`` is the ensemble mean, ``per_replica`` the totals."""

    t_edges: np.ndarray
    x_edges: np.ndarray
    xi_edges: np.ndarray
    mass: np.ndarray  # (n_t, n_x, n_xi)
    per_replica: np.ndarray  # (R,)
    outside: int = 0  # samples clamped into the end xi-bins

    @property
    def total(self) -> float:
        return float(self.mass.sum())

    def marginal_xi(self) -> np.ndarray:
        return self.mass.sum(axis=(0, 1))


class KineticObserver:
    """Streams the kinetic measure while the solver runs; no state history needed."""

    name = "kinetic"

    def __init__(self, flux: FluxModel, n_t_bins: int = 10, n_x_bins: int = 20, edges=None):
        self.edges = xi_edges(flux) if edges is None else np.asarray(edges, dtype=float)
        if self.edges[0] > flux.a_lo or self.edges[-1] < flux.b_hi:
            raise DomainError("velocity bins must cover the invariant interval")
        self.n_t, self.n_x = n_t_bins, n_x_bins

    def begin(self, R, config, plan):
        grid = config.grid
        step_t = np.minimum((plan.times[:-1] / config.T * self.n_t).astype(int), self.n_t - 1)
        cell_x = np.minimum((grid.centers[:-1] * self.n_x).astype(int), self.n_x - 1)
        return {"hist": np.zeros((R, self.n_t, self.n_x, len(self.edges) - 1)), "plan": plan,
                "eps": config.eps, "dx": grid.dx, "step_t": step_t, "cell_x": cell_x, "outside": 0}

    def update(self, st, j, u):
        plan = st["plan"]
        if j >= plan.n_steps:
            return
        d = np.diff(u, axis=-1)
        w = st["eps"] * d * d / st["dx"] * plan.dt
        left = u[..., :-1]
        nb = len(self.edges) - 1
        b = np.searchsorted(self.edges, left, side="right") - 1
        st["outside"] += int(np.count_nonzero((b < 0) | (b >= nb)))
        b = np.clip(b, 0, nb - 1)
        R = u.shape[0]
        r = np.repeat(np.arange(R)[:, None], left.shape[-1], axis=1)
        flat = np.ravel_multi_index((r, np.full_like(r, st["step_t"][j]),
                                     np.broadcast_to(st["cell_x"], r.shape), b), st["hist"].shape)
        np.add.at(st["hist"].reshape(-1), flat.ravel(), w.ravel())

    def finish(self, states):
        hist = np.concatenate([s["hist"] for s in states], axis=0)
        plan = states[0]["plan"]
        T = plan.n_steps * plan.dt
        t_edges = np.linspace(0.0, T, self.n_t + 1)
        x_edges = np.linspace(0.0, 1.0, self.n_x + 1)
        per = hist.reshape(hist.shape[0], -1).sum(axis=1)
        return KineticHistogram(t_edges, x_edges, self.edges, tree_mean(hist, axis=0), per,
                                sum(s["outside"] for s in states))


def kinetic_measure(traj: TrajectoryRecord, flux: FluxModel | None = None, n_t_bins: int = 10,
                    n_x_bins: int = 20, edges=None) -> KineticHistogram:
    """Kinetic-measure histogram; reuses the streamed copy when the run carried an observer."""
    if "kinetic" in traj.extra and flux is None:
        return traj.extra["kinetic"]
    if flux is None:
        raise ValueError("pass the flux (for the velocity grid) or run with a KineticObserver")
    states = traj.require_states()
    ob = KineticObserver(flux, n_t_bins, n_x_bins, edges)
    st = ob.begin(states.shape[1], traj.config, traj.plan)
    for j in range(states.shape[0]):
        ob.update(st, j, states[j])
    return ob.finish([st])


def accumulated_dissipation(traj: TrajectoryRecord) -> np.ndarray:
    """Per-replica sum over steps of eps ||u_x||^2 dt from the solver series (left endpoints)."""
    return np.sum(traj.series["grad_energy"][:-1], axis=0) * traj.plan.dt


# -------------------------------------------------------------- test functions


_BUMP = Polynomial([1.0, 0.0, -1.0]) ** 4  # (1 - r^2)^4 on |r| < 1


@dataclass(frozen=True)
class TestFunction:
    """phi(t, x, xi) = theta(t) psi(x) P(xi).

    theta(t) = (1 - (t/t_end)^2)^4 on [0, t_end] and 0 afterwards.  ``x_kind`` is
    ``bump`` ((1 - r^2)^4 with r = (x - center)/width), ``cosine`` (cos(freq pi x))
    or ``constant``.  ``xi_coeffs`` are ascending coefficients of P.
    """

    __test__ = False  # not a pytest class

    t_end: float
    x_kind: str = "bump"
    center: float = 0.5
    width: float = 0.3
    freq: int = 1
    xi_coeffs: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if self.x_kind not in ("bump", "cosine", "constant"):
            raise DomainError(f"unknown spatial profile {self.x_kind!r}")
        if self.t_end <= 0 or self.width <= 0:
            raise DomainError("test function needs positive t_end and width")

    @property
    def compact_in_x(self) -> bool:
        return self.x_kind == "bump" and self.center - self.width > 0.0 and self.center + self.width < 1.0

    def theta(self, t):
        s = np.asarray(t, dtype=float) / self.t_end
        return np.where(s < 1.0, (1.0 - s * s) ** 4, 0.0)

    def psi(self, x):
        x = np.asarray(x, dtype=float)
        if self.x_kind == "bump":
            r = (x - self.center) / self.width
            return np.where(np.abs(r) < 1.0, _BUMP(np.clip(r, -1, 1)), 0.0)
        if self.x_kind == "cosine":
            return np.cos(self.freq * np.pi * x)
        return np.ones_like(x)

    def dpsi(self, x):
        x = np.asarray(x, dtype=float)
        if self.x_kind == "bump":
            r = (x - self.center) / self.width
            return np.where(np.abs(r) < 1.0, _BUMP.deriv()(np.clip(r, -1, 1)) / self.width, 0.0)
        if self.x_kind == "cosine":
            k = self.freq * np.pi
            return -k * np.sin(k * x)
        return np.zeros_like(x)

    def cell_integrals(self, faces) -> np.ndarray:
        """Exact integrals of psi over consecutive face intervals."""
        f = np.asarray(faces, dtype=float)
        if self.x_kind == "bump":
            prim = _BUMP.integ()
            r = np.clip((f - self.center) / self.width, -1.0, 1.0)
            F = self.width * prim(r)
        elif self.x_kind == "cosine":
            k = self.freq * np.pi
            F = np.sin(k * f) / k if self.freq else f
        else:
            F = f
        return np.diff(F)

    @property
    def P(self) -> Polynomial:
        return Polynomial(self.xi_coeffs)

    def Q(self, u):
        """int_0^u P."""
        return self.P.integ()(u)

    def R(self, flux: FluxModel, u):
        """int_0^u a P (first flux component)."""
        return (flux.dpolys[0] * self.P).integ()(u)


@dataclass(frozen=True)
class WeakFormTerms:
    lhs: dict[str, np.ndarray]
    rhs: dict[str, np.ndarray]

    @property
    def scale(self) -> np.ndarray:
        return sum(np.abs(v) for v in self.lhs.values()) + sum(np.abs(v) for v in self.rhs.values())

    @property
    def defect(self) -> np.ndarray:
        return sum(self.lhs.values()) - sum(self.rhs.values())


_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(8)


def _scheme_split(numflux: NumericalFlux, eps: float, dx: float):
    """Left/right parts of the total face flux F(u, v) = h_left(u) + h_right(v)."""
    flux = numflux.flux
    if numflux.scheme == "engquist-osher":
        def left(u):
            return numflux.split(u)[0] + eps * u / dx

        def right(v):
            return numflux.split(v)[1] - eps * v / dx
    else:
        s = numflux.lf_speed

        def left(u):
            return 0.5 * (flux.A1(u) + s * u) + eps * u / dx

        def right(v):
            return 0.5 * (flux.A1(v) - s * v) - eps * v / dx
    return left, right


def _kink_points(flux: FluxModel, lo: float, hi: float) -> np.ndarray:
    pts = [lo, hi]
    if flux.is_polynomial and flux.dpolys[0].degree() >= 1:
        r = np.atleast_1d(flux.dpolys[0].roots())
        r = r[np.abs(r.imag) < 1e-9].real
        pts += [x for x in r if lo < x < hi]
    return np.unique(pts)


def _window_integral(h, breaks, a, b):
    """int_a^b h for lo <= a <= b <= hi, Gauss-Legendre on each smooth piece."""
    total = np.zeros(np.shape(a))
    for p, q in zip(breaks[:-1], breaks[1:]):
        s = np.clip(a, p, q)
        e = np.clip(b, p, q)
        mid, half = 0.5 * (s + e), 0.5 * (e - s)
        nodes = mid[..., None] + half[..., None] * _GAUSS_X
        total = total + half * (h(nodes) @ _GAUSS_W)
    return total


def kruzhkov_scheme_entropy_flux(numflux: NumericalFlux, eps: float, dx: float, entropy: EntropyPair, u):
    """Numerical entropy flux at interior faces matching the monotone scheme.

    The capped Kruzhkov entropy is the average of |u - k| over k in
    [c - delta, c + delta], so its face flux is the same average of
    F(u v k, w v k) - F(u ^ k, w ^ k).  For a split flux each half reduces to
    h(u) (2m - 2c) - int_lo^m h + int_m^hi h with m = clip(u, lo, hi).
    """
    if entropy.kind != "kruzhkov":
        raise ValueError("scheme entropy flux is available for Kruzhkov entropies only")
    c, d = entropy.c, entropy.delta
    lo, hi = c - d, c + d
    breaks = _kink_points(numflux.flux, lo, hi)
    left, right = _scheme_split(numflux, eps, dx)

    def part(h, v):
        # outside the window the average collapses to +-(2 delta h(v) - int_lo^hi h)
        full = float(_window_integral(h, breaks, np.array(lo), np.array(hi)))
        out = np.sign(v - c) * (2 * d * h(v) - full)
        inside = (v > lo) & (v < hi)
        if np.any(inside):
            w = v[inside]
            out[inside] = (h(w) * (2 * w - 2 * c) - _window_integral(h, breaks, np.full_like(w, lo), w)
                           + _window_integral(h, breaks, w, np.full_like(w, hi)))
        return out

    u = np.asarray(u, dtype=float)
    return (part(left, u[..., :-1]) + part(right, u[..., 1:])) / (2 * d)


def _common(traj, test):
    states = traj.require_states()
    plan = traj.plan
    t = plan.times
    if test.t_end > t[-1] * (1 + 1e-12):
        raise DomainError("test function must vanish before the final time")
    th = test.theta(t)
    return states[:-1], states[0], th[:-1], np.diff(th), th[0], plan.dt


def weak_form_terms(traj: TrajectoryRecord, form: str, test: TestFunction, flux: FluxModel,
                    noise: NoiseModel, entropy: EntropyPair | None = None,
                    entropy_flux_rule: str = "scheme") -> WeakFormTerms:
    """Every term of the chosen identity, paired exactly against the piecewise-constant trajectory.

    Arrays have one entry per replica.  Time pairings use theta(t_{n+1}) - theta(t_n),
    spatial derivatives fall on psi through face values, and stochastic,
    Ito-correction and measure terms are frozen at (t_n, x_i).

    For the entropy inequality ``entropy_flux_rule="scheme"`` (Kruzhkov entropies)
    pairs the scheme's own numerical entropy flux, which carries the viscous
    part, against theta(t_{n+1}) cell-integral differences; the deterministic
    defect is then a sum of non-negative cell dissipations.  ``"exact"`` uses
    q(u) cell values like the other forms.
    """
    if form not in ("kinetic", "entropy", "conservation"):
        raise ValueError(f"unknown weak form {form!r}")
    if form != "conservation" and not test.compact_in_x:
        raise DomainError(f"{form} form needs a test function compactly supported inside (0, 1)")
    if form == "entropy" and entropy is None:
        raise ValueError("entropy form needs an entropy pair")
    U, U0, th, dth, th0, dt = _common(traj, test)
    grid = traj.grid
    eps = traj.config.eps
    x, faces = grid.centers, grid.faces
    cell = test.cell_integrals(faces)
    dface = np.diff(test.psi(faces))
    dpsi_in = test.dpsi(faces[1:-1])
    inc = traj.path.increments  # (steps, R, K)
    spatial = noise.spatial(x)  # (N, K)

    n_rep = U.shape[1]
    noisy = noise.K > 0

    def ito(weight):  # sum_n theta_n sum_k dbeta_k sum_i g_k weight_i Psi_i
        if not noisy:
            return np.zeros(n_rep)
        proj = np.einsum("nri,ik->nrk", noise.bump(U) * weight * cell, spatial)
        return np.einsum("n,nrk,nrk->r", th, proj, inc)

    def paired(vals):  # sum_n theta_n dt sum_i vals
        return dt * np.einsum("n,nr->r", th, vals)

    if form == "conservation":
        lhs = {"time": np.einsum("n,nri,i->r", dth, U, cell),
               "initial": th0 * (U0 @ cell),
               "transport": paired(flux.A1(U) @ dface),
               "viscous": -eps * paired(np.diff(U, axis=-1) @ dpsi_in),
               "noise": ito(1.0)}
        return WeakFormTerms(lhs, {})

    if form == "entropy" and entropy_flux_rule == "scheme":
        nf = NumericalFlux(flux, traj.config.flux_scheme)
        Qn = kruzhkov_scheme_entropy_flux(nf, eps, grid.dx, entropy, U)
        th_next = th + dth
        EU = entropy.eta(U)
        lhs = {"time": np.einsum("n,nri,i->r", dth, EU, cell),
               "initial": th0 * (entropy.eta(U0) @ cell),
               "transport": dt / grid.dx * np.einsum("n,nri,i->r", th_next, Qn, np.diff(cell))}
        G2 = np.sum((noise.bump(U)[..., None] * spatial) ** 2, axis=-1) if noisy else np.zeros_like(U)
        rhs = {"noise": -ito(entropy.deta(U)),
               "ito_correction": -0.5 * paired((entropy.d2eta(U) * G2) @ cell)}
        return WeakFormTerms(lhs, rhs)
    if form == "kinetic":
        Qf, Rf = test.Q, (lambda v: test.R(flux, v))
        Pw, dPw = test.P, test.P.deriv()
    else:
        Qf, Rf = entropy.eta, (lambda v: entropy_flux(entropy, flux, v)[..., 0])
        Pw, dPw = entropy.deta, entropy.d2eta
    QU = Qf(U)
    lhs = {"time": np.einsum("n,nri,i->r", dth, QU, cell),
           "initial": th0 * (Qf(U0) @ cell),
           "transport": paired(Rf(U) @ dface),
           "viscous": -eps * paired(np.diff(QU, axis=-1) @ dpsi_in)}
    G2 = np.sum((noise.bump(U)[..., None] * spatial) ** 2, axis=-1) if noisy else np.zeros_like(U)
    rhs = {"noise": -ito(Pw(U)),
           "ito_correction": -0.5 * paired((dPw(U) * G2) @ cell)}
    if form == "kinetic":
        d = np.diff(U, axis=-1)
        dens = eps * d * d / grid.dx * dPw(U[..., :-1]) * test.psi(x[:-1])
        rhs["measure"] = paired(dens.sum(axis=-1))
    return WeakFormTerms(lhs, rhs)


def weak_form_residual(traj: TrajectoryRecord, form: str, test: TestFunction, flux: FluxModel,
                       noise: NoiseModel, entropy: EntropyPair | None = None,
                       entropy_flux_rule: str = "scheme") -> np.ndarray:
    """Normalised residual per replica.

    For ``kinetic`` and ``conservation`` this is |LHS - RHS| / sum |terms|.  For
    ``entropy`` the sign is kept: LHS - RHS, which is non-negative for an
    entropy-dissipating trajectory.
    """
    terms = weak_form_terms(traj, form, test, flux, noise, entropy, entropy_flux_rule)
    scale = np.where(terms.scale > 0, terms.scale, 1.0)
    if form == "entropy":
        return terms.defect / scale
    return np.abs(terms.defect) / scale


# ------------------------------------------------------------------ mass series


@dataclass(frozen=True)
class MassStats:
    mass: np.ndarray  # (n_steps + 1, R)
    drift: np.ndarray  # (R,)
    mean_drift: float
    se: float


def mass_series(traj: TrajectoryRecord) -> MassStats:
    mass = traj.series["mass"]
    drift = mass[-1] - mass[0]
    m, se = mean_and_se(drift)
    return MassStats(mass, drift, float(m), float(se))


def mass_increment_defect(traj: TrajectoryRecord, noise: NoiseModel) -> np.ndarray:
    """Per-replica max over steps of |dmass - sum_k (sum_i g_k dx) dbeta_k|."""
    U = traj.require_states()
    grid = traj.grid
    proj = np.einsum("nri,ik->nrk", noise.bump(U[:-1]), noise.spatial(grid.centers)) * grid.dx
    expected = np.einsum("nrk,nrk->nr", proj, traj.path.increments)
    actual = np.diff(grid.mass(U), axis=0)
    return np.max(np.abs(actual - expected), axis=0)


# -------------------------------------------------------------- comparison


@dataclass(frozen=True)
class PositivePartSeries:
    times: np.ndarray
    values: np.ndarray  # (m, R)
    max_increase: np.ndarray  # (R,)
    increased: np.ndarray  # (R,) bool

    @property
    def violations(self) -> int:
        return int(np.count_nonzero(self.increased))


def _same_setup(a: TrajectoryRecord, b: TrajectoryRecord):
    if a.grid.N != b.grid.N or a.plan.n_steps != b.plan.n_steps or a.plan.dt != b.plan.dt:
        raise ValueError("grid mismatch between trajectories")
    pa, pb = a.path, b.path
    if pa.seed != pb.seed or pa.replicas != pb.replicas or not np.array_equal(pa.increments, pb.increments):
        raise ValueError("trajectories were driven by different Brownian paths")


def positive_part_series(traj1: TrajectoryRecord, traj2: TrajectoryRecord, tol: float = 1e-8) -> PositivePartSeries:
    """int (u1 - u2)_+ dx per recorded time; per-step when both runs kept their states."""
    _same_setup(traj1, traj2)
    if traj1.states is not None and traj2.states is not None:
        a, b, t = traj1.states, traj2.states, traj1.times
    else:
        a, b, t = traj1.snapshots, traj2.snapshots, traj1.snapshot_times
    vals = np.sum(np.maximum(a - b, 0.0), axis=-1) * traj1.grid.dx
    inc = np.max(np.diff(vals, axis=0), axis=0) if len(t) > 1 else np.zeros(vals.shape[1])
    return PositivePartSeries(t, vals, inc, inc > tol)


# ---------------------------------------------------------------- boundary trace


def _layer_values(u, depths, dx):
    """Linear interpolation at x = s and x = 1 - s; output (..., n_depth, 2)."""
    p = np.asarray(depths) / dx - 0.5
    i0 = np.floor(p).astype(int)
    w = p - i0
    left = u[..., i0] * (1 - w) + u[..., i0 + 1] * w
    rev = u[..., ::-1]
    right = rev[..., i0] * (1 - w) + rev[..., i0 + 1] * w
    return np.stack([left, right], axis=-1)


def _check_depths(depths, dx):
    d = np.asarray(depths, dtype=float)
    if d.ndim != 1 or len(d) < 2:
        raise DomainError("need at least two depths")
    if np.any(np.diff(d) >= 0):
        raise DomainError("depths must be strictly decreasing")
    if d[-1] < dx * (1 - 1e-12):
        raise DomainError(f"depth {d[-1]} is below the grid resolution {dx}")
    if d[0] > 0.5 - dx:
        raise DomainError("depth reaches the middle of the domain")
    return d


class LayerObserver:
    """Records boundary-layer values at fixed depths after every step."""

    name = "layers"

    def __init__(self, depths):
        self.depths = np.asarray(depths, dtype=float)

    def begin(self, R, config, plan):
        _check_depths(self.depths, config.grid.dx)
        return {"dx": config.grid.dx, "rows": []}

    def update(self, st, j, u):
        st["rows"].append(_layer_values(u, self.depths, st["dx"]))

    def finish(self, states):
        return np.concatenate([np.stack(s["rows"]) for s in states], axis=1)


@dataclass(frozen=True)
class TraceSeries:
    depths: np.ndarray  # strictly decreasing
    times: np.ndarray
    left: np.ndarray  # (n_depth, n_times, R)
    right: np.ndarray
    distances_left: np.ndarray  # (n_depth - 1, R), consecutive depth pairs
    distances_right: np.ndarray
    trace_left: np.ndarray  # (n_times, R)
    trace_right: np.ndarray

    @property
    def cauchy_left(self) -> np.ndarray:
        return np.all(np.diff(self.distances_left, axis=0) < 0, axis=0)

    @property
    def cauchy_right(self) -> np.ndarray:
        return np.all(np.diff(self.distances_right, axis=0) < 0, axis=0)


def _richardson(vals, depths):
    """Linear extrapolation to depth 0 from the two shallowest layers."""
    s1, s2 = depths[-1], depths[-2]
    v1, v2 = vals[-1], vals[-2]
    return v1 - s1 * (v2 - v1) / (s2 - s1)


def strong_trace(traj: TrajectoryRecord, depths) -> TraceSeries:
    """Layer series at x = s and x = 1 - s with L1-in-time distances and an extrapolated trace."""
    dx = traj.grid.dx
    d = _check_depths(depths, dx)
    if "layers" in traj.extra and traj.extra["layers"].shape[2] == len(d) and traj.states is None:
        lay = traj.extra["layers"]  # (n_times, R, n_depth, 2)
    else:
        lay = _layer_values(traj.require_states(), d, dx)
    lay = np.moveaxis(lay, 2, 0)  # (n_depth, n_times, R, 2)
    t = traj.times
    wt = np.diff(t)
    dist = np.einsum("n,dnrs->drs", wt, np.abs(np.diff(lay, axis=0)[:, :-1]))
    trace = _richardson(lay, d)
    return TraceSeries(d, t, lay[..., 0], lay[..., 1], dist[..., 0], dist[..., 1], trace[..., 0], trace[..., 1])


def l1_time_distance(t1, f1, t2, f2, T: float) -> np.ndarray:
    """L1(0, T) distance of two left-continuous step functions on different time grids."""
    knots = np.union1d(t1[t1 < T], t2[t2 < T])
    knots = np.append(knots, T)
    mid = knots[:-1]
    i1 = np.searchsorted(t1, mid, side="right") - 1
    i2 = np.searchsorted(t2, mid, side="right") - 1
    return np.einsum("n,n...->...", np.diff(knots), np.abs(f1[i1] - f2[i2]))


# ------------------------------------------------------------------ regularity


@dataclass(frozen=True)
class Cutoff:
    """Interior cutoff (1 - r^2)^4, r = (x - center)/width."""

    center: float = 0.5
    width: float = 0.4

    def __post_init__(self):
        if self.center - self.width <= 0.0 or self.center + self.width >= 1.0:
            raise DomainError("cutoff must be supported strictly inside (0, 1)")

    def __call__(self, x):
        r = (np.asarray(x, dtype=float) - self.center) / self.width
        return np.where(np.abs(r) < 1.0, _BUMP(np.clip(r, -1, 1)), 0.0)


@dataclass(frozen=True)
class RegularityReport:
    s: float
    r: float
    cutoff: Cutoff
    lam: float
    eps: np.ndarray
    w_s_r: np.ndarray  # (n_eps, R)
    holder: np.ndarray  # (n_eps, R)

    def means(self) -> tuple[np.ndarray, np.ndarray]:
        return tree_mean(self.w_s_r, axis=1), tree_mean(self.holder, axis=1)


def coarsen(u, N_target: int | None) -> np.ndarray:
    """Block-average cell values onto N_target cells (N must be a multiple)."""
    u = np.asarray(u, dtype=float)
    N = u.shape[-1]
    if N_target is None or N_target == N:
        return u
    if N % N_target:
        raise ValueError(f"cannot coarsen {N} cells to {N_target}")
    return u.reshape(u.shape[:-1] + (N_target, N // N_target)).mean(axis=-1)


def sobolev_slobodeckij(fields, s: float, r: float, cutoff: Cutoff) -> np.ndarray:
    """(||psi u||_r^r + [psi u]_{s,r}^r)^{1/r} on the cell grid, over the trailing axis.

    The seminorm is the double sum over distinct cells of
    |w_i - w_j|^r / |x_i - x_j|^{1 + s r} dx^2, evaluated lag by lag.
    """
    if not (0.0 < s < 1.0) or not (1.0 <= r < 2.0):
        raise DomainError("need 0 < s < 1 and 1 <= r < 2")
    u = np.asarray(fields, dtype=float)
    N = u.shape[-1]
    dx = 1.0 / N
    w = cutoff((np.arange(N) + 0.5) * dx) * u
    semi = np.zeros(u.shape[:-1])
    for k in range(1, N):
        diff = np.abs(w[..., k:] - w[..., :-k]) ** r
        semi += 2.0 * diff.sum(axis=-1) / (k * dx) ** (1.0 + s * r)
    semi *= dx * dx
    lr = np.sum(np.abs(w) ** r, axis=-1) * dx
    return (lr + semi) ** (1.0 / r)


def gagliardo_norm(traj: TrajectoryRecord, s: float = 0.02, r: float = 1.5, cutoff: Cutoff | None = None,
                   coarsen_to: int | None = None) -> np.ndarray:
    """Snapshot-averaged W^{s,r} norm of the cut-off solution, one value per replica."""
    cutoff = Cutoff() if cutoff is None else cutoff
    snaps = coarsen(traj.snapshots, coarsen_to)
    per_time = sobolev_slobodeckij(snaps, s, r, cutoff) ** r
    return tree_mean(per_time, axis=0) ** (1.0 / r)


def holder_time_seminorm(traj: TrajectoryRecord, lam: float, n_modes: int | None = None,
                         coarsen_to: int | None = None, times=None, snapshots=None) -> np.ndarray:
    """max over snapshot pairs of ||u(t) - u(t')||_{H^-1} / |t - t'|^lam, per replica."""
    if not 0.0 < lam < 0.5:
        raise DomainError("Holder exponent must lie in (0, 1/2)")
    snaps = traj.snapshots if snapshots is None else np.asarray(snapshots)
    t = traj.snapshot_times if times is None else np.asarray(times)
    if snaps.shape[0] < 2:
        raise ValueError("need at least two snapshots")
    c = spectral.to_modes(coarsen(snaps, coarsen_to), n_modes)
    wgt = 1.0 / (1.0 + spectral.eigenvalues(c.shape[-1]))
    best = np.zeros(c.shape[1:-1])
    for a in range(len(t) - 1):
        d = c[a + 1:] - c[a]
        nrm = np.sqrt(np.sum(wgt * d * d, axis=-1))
        ratio = nrm / ((t[a + 1:] - t[a]) ** lam).reshape((-1,) + (1,) * (nrm.ndim - 1))
        best = np.maximum(best, ratio.max(axis=0))
    return best


__all__ = [
    "xi_edges", "f_indicator", "chi_profile", "ChiDistance", "chi_function_distance",
    "KineticHistogram", "KineticObserver", "kinetic_measure", "accumulated_dissipation",
    "TestFunction", "WeakFormTerms", "kruzhkov_scheme_entropy_flux", "weak_form_terms", "weak_form_residual",
    "MassStats", "mass_series", "mass_increment_defect",
    "PositivePartSeries", "positive_part_series",
    "LayerObserver", "TraceSeries", "strong_trace", "l1_time_distance",
    "Cutoff", "RegularityReport", "coarsen", "sobolev_slobodeckij", "gagliardo_norm",
    "holder_time_seminorm",
]
