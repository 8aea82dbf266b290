"""Pathwise solvers for the viscous problem

    du + d_x A(u) dt - eps u_xx dt = sum_k g_k(x, u) dbeta_k,   (A(u) - eps u_x) nu = 0 on {0, 1}.

Two backends share one time grid and one set of Brownian increments:

* ``finite-volume``: monotone Engquist-Osher (or Lax-Friedrichs) fluxes, zero
  total flux through both boundary faces, explicit Euler-Maruyama noise.
* ``mild``: Picard iteration of the mild map
  K(v) = S(t)u0 - int S div A(v) + int S Phi(v) dW + w^v in the cosine basis.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import spectral
from .model import DomainError, FluxModel, InitialData, NoiseModel


class CFLError(ValueError):
    def __init__(self, dt: float, suggested: float):
        super().__init__(f"time step {dt:.3e} violates the CFL bound; use dt <= {suggested:.3e}")
        self.suggested = suggested


class DivergenceError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite state at step {step}")
        self.step = step


class CapacityError(OverflowError):
    """Requested (replica, mode, step) index does not fit the generator's counter space."""


class ConvergenceError(RuntimeError):
    def __init__(self, history: list[float]):
        super().__init__(f"Picard iteration did not converge in {len(history)} iterations; "
                         f"last distance {history[-1]:.3e}" if history else "no iterations")
        self.history = history


class FluxDomainWarning(RuntimeWarning):
    """Flux evaluated far outside the invariant interval."""


# ------------------------------------------------------------------ reductions


def tree_sum(x, axis: int = 0) -> np.ndarray:
    """Pairwise sum along ``axis`` with a topology fixed by the length alone."""
    x = np.moveaxis(np.asarray(x, dtype=float), axis, 0)
    n = x.shape[0]
    if n == 0:
        return np.zeros(x.shape[1:])
    if n == 1:
        return x[0].copy()
    h = n // 2
    return tree_sum(x[:h]) + tree_sum(x[h:])


def tree_mean(x, axis: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return tree_sum(x, axis) / x.shape[axis]


def mean_and_se(x, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Ensemble mean and standard error with deterministic reductions."""
    x = np.moveaxis(np.asarray(x, dtype=float), axis, 0)
    n = x.shape[0]
    m = tree_mean(x)
    if n < 2:
        return m, np.full_like(m, np.nan)
    var = tree_sum((x - m) ** 2) / (n - 1)
    return m, np.sqrt(var / n)


# ------------------------------------------------------------------------ grid


@dataclass(frozen=True)
class Grid1D:
    N: int = 200

    def __post_init__(self):
        if self.N < 8:
            raise DomainError("need at least 8 cells")

    @property
    def dx(self) -> float:
        return 1.0 / self.N

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.N) + 0.5) / self.N

    @property
    def faces(self) -> np.ndarray:
        return np.arange(self.N + 1) / self.N

    def mass(self, u) -> np.ndarray:
        return np.sum(u, axis=-1) * self.dx

    def l2sq(self, u) -> np.ndarray:
        return np.sum(np.asarray(u) ** 2, axis=-1) * self.dx

    def grad_sq(self, u) -> np.ndarray:
        """sum over interior faces of ((u_{i+1} - u_i)/dx)^2 dx."""
        d = np.diff(u, axis=-1)
        return np.sum(d * d, axis=-1) / self.dx


# ---------------------------------------------------------------------- config


@dataclass(frozen=True)
class SolverConfig:
    """Discretisation parameters.  ``dt=None`` selects the largest stable step."""

    eps: float = 1e-2
    T: float = 0.5
    N: int = 200
    dt: float | None = None
    cfl_safety: float = 0.9
    backend: str = "finite-volume"
    flux_scheme: str = "engquist-osher"
    clip_to_bounds: bool = False
    n_snapshots: int = 50

    def __post_init__(self):
        if self.eps <= 0:
            raise DomainError("viscosity must be positive")
        if self.T <= 0:
            raise DomainError("horizon must be positive")
        if not 0 < self.cfl_safety <= 1:
            raise DomainError("cfl_safety must lie in (0, 1]")
        if self.backend not in ("finite-volume", "mild"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.flux_scheme not in ("engquist-osher", "lax-friedrichs"):
            raise ValueError(f"unknown numerical flux {self.flux_scheme!r}")
        if self.n_snapshots < 1:
            raise DomainError("need at least one snapshot interval")

    @property
    def grid(self) -> Grid1D:
        return Grid1D(self.N)

    def cfl_limit(self, flux: FluxModel) -> float:
        """Largest step for which every update is a convex combination (monotone scheme)."""
        dx = 1.0 / self.N
        speed = flux.max_speed()
        return self.cfl_safety / (speed / dx + 2.0 * self.eps / dx ** 2)

    def plan(self, flux: FluxModel) -> "StepPlan":
        """Resolve (dt, n_steps) with T/dt integral and steps divisible by the snapshot count."""
        dx = 1.0 / self.N
        speed = flux.max_speed()
        bound = self.cfl_safety * min(dx / speed if speed > 0 else math.inf, dx * dx / (2 * self.eps))
        if self.dt is not None:
            if self.dt > bound * (1 + 1e-12):
                raise CFLError(self.dt, min(bound, self.cfl_limit(flux)))
            target = self.dt
        else:
            target = self.cfl_limit(flux)
        m = self.n_snapshots
        n = int(math.ceil(self.T / target / m - 1e-9)) * m
        return StepPlan(self.T / n, n, m)


@dataclass(frozen=True)
class StepPlan:
    dt: float
    n_steps: int
    n_snapshots: int

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def snapshot_steps(self) -> np.ndarray:
        return np.arange(self.n_snapshots + 1) * (self.n_steps // self.n_snapshots)


# -------------------------------------------------------------- Brownian paths

_KEY_MODE_BITS = 16
_MAX_REPLICA = 1 << 48
_MAX_STEPS = 1 << 62


def _check_capacity(replica: int, k: int, n_steps: int):
    if not 0 <= replica < _MAX_REPLICA:
        raise CapacityError(f"replica index {replica} exceeds 2^48")
    if not 0 <= k < (1 << _KEY_MODE_BITS):
        raise CapacityError(f"mode index {k} exceeds 2^16")
    if n_steps >= _MAX_STEPS:
        raise CapacityError(f"{n_steps} steps exceed the counter space")


def _generator(seed: int, replica: int, k: int) -> np.random.Philox:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, (replica << _KEY_MODE_BITS) | k], dtype=np.uint64)
    return np.random.Philox(key=key)


def _box_muller(words: np.ndarray) -> np.ndarray:
    """Standard normals from consecutive pairs of raw 64-bit words (2 normals per pair)."""
    u = ((words >> np.uint64(11)).astype(float) + 0.5) * 2.0 ** -53
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(len(u))
    out[0::2] = r * np.cos(2 * np.pi * u2)
    out[1::2] = r * np.sin(2 * np.pi * u2)
    return out


def standard_normals(seed: int, replica: int, k: int, start: int, count: int) -> np.ndarray:
    """Normals z_j, j = start..start+count-1, for the stream keyed by (seed, replica, k).

    z_j depends only on (seed, replica, k, j): normal j comes from raw words
    2*(j//2) and 2*(j//2)+1 of the stream, which the generator can jump to.
    """
    _check_capacity(replica, k, start + count)
    if count <= 0:
        return np.zeros(0)
    first_pair = start // 2
    n_pairs = (start + count + 1) // 2 - first_pair
    gen = _generator(seed, replica, k)
    word0 = 2 * first_pair
    gen.advance(word0 // 4)
    skip = word0 % 4
    words = gen.random_raw(skip + 2 * n_pairs)[skip:]
    z = _box_muller(np.asarray(words, dtype=np.uint64))
    off = start - 2 * first_pair
    return z[off: off + count]


@dataclass(frozen=True)
class PathRecord:
    """Brownian increments dbeta_k(t_j), shape (n_steps, replicas, K)."""

    seed: int
    replicas: tuple[int, ...]
    dt: float
    increments: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    @property
    def K(self) -> int:
        return self.increments.shape[2]

    def subset(self, idx) -> "PathRecord":
        idx = np.atleast_1d(idx)
        return PathRecord(self.seed, tuple(self.replicas[i] for i in idx), self.dt, self.increments[:, idx])


def sample_increments(noise: NoiseModel, plan: StepPlan, seed: int, replicas=0) -> PathRecord:
    """Increments with variance dt keyed by (seed, replica, k, step)."""
    reps = tuple(int(r) for r in np.atleast_1d(replicas))
    inc = np.zeros((plan.n_steps, len(reps), noise.K))
    scale = math.sqrt(plan.dt)
    for i, r in enumerate(reps):
        for k in range(noise.K):
            inc[:, i, k] = scale * standard_normals(seed, r, k, 0, plan.n_steps)
    return PathRecord(int(seed), reps, plan.dt, inc)


def zero_path(plan: StepPlan, replicas: int = 1, K: int = 0) -> PathRecord:
    return PathRecord(0, tuple(range(replicas)), plan.dt, np.zeros((plan.n_steps, replicas, K)))


# --------------------------------------------------------------- numerical flux


class NumericalFlux:
    """Two-point monotone flux F(u, v) for the first flux component."""

    def __init__(self, flux: FluxModel, scheme: str = "engquist-osher"):
        self.flux = flux
        self.scheme = scheme
        self.lf_speed = flux.max_speed()
        self._lo = flux.a_lo - 1.0
        self._hi = flux.b_hi + 1.0
        if scheme == "engquist-osher":
            if flux.is_polynomial:
                self._setup_polynomial()
            else:
                self._setup_tabulated()
            self._plus0 = float(self._G(np.array(0.0)))

    def _setup_polynomial(self):
        dp = self.flux.dpolys[0]
        roots = np.atleast_1d(dp.roots()) if dp.degree() >= 1 else np.array([])
        real = np.sort(roots[np.abs(roots.imag) < 1e-9].real) if len(roots) else np.array([])
        merged: list[float] = []
        for r in real:
            if not merged or r - merged[-1] > 1e-9:
                merged.append(float(r))
        br = np.array(merged)
        A = self.flux.polys[0]
        if len(br) == 0:
            mid = np.array([0.0])
            edges = np.array([0.0])
        else:
            mid = np.concatenate([[br[0] - 1.0], (br[:-1] + br[1:]) / 2, [br[-1] + 1.0]])
            edges = br
        positive = dp(mid) > 0
        # cumulative integral of a^+ from edges[0] up to each breakpoint
        cum = np.zeros(len(edges))
        for j in range(1, len(edges)):
            cum[j] = cum[j - 1] + (A(edges[j]) - A(edges[j - 1]) if positive[j] else 0.0)
        self._edges, self._positive, self._cum, self._A = edges, positive, cum, A

    def _G(self, u):
        """int_{edges[0]}^u max(a, 0)."""
        if not self.flux.is_polynomial:
            return np.interp(u, self._tab_x, self._tab_G)
        edges = self._edges
        if len(edges) == 1 and len(self._positive) == 1:
            # no sign change: a has one sign everywhere
            return (self._A(u) - self._A(edges[0])) if self._positive[0] else np.zeros_like(u)
        j = np.searchsorted(edges, u, side="right")  # interval index 0..len(edges)
        ref = edges[np.maximum(j - 1, 0)]
        base = self._cum[np.maximum(j - 1, 0)]
        pos = self._positive[j]
        return base + np.where(pos, self._A(u) - self._A(ref), 0.0)

    def _setup_tabulated(self, n: int = 200_001):
        x = np.linspace(self._lo - 1.0, self._hi + 1.0, n)
        ap = np.maximum(self.flux.a1(x), 0.0)
        G = np.concatenate([[0.0], np.cumsum((ap[1:] + ap[:-1]) * np.diff(x) / 2)])
        self._tab_x, self._tab_G = x, G

    def split(self, u):
        """(A^+(u), A^-(u)) with A^+ + A^- = A and A^+(0) = A(0)."""
        Au = self.flux.A1(u)
        Ap = float(self.flux.A1(0.0)) + self._G(u) - self._plus0
        return Ap, Au - Ap

    def faces(self, u) -> np.ndarray:
        """Interior face fluxes F(u_i, u_{i+1}), shape (..., N-1)."""
        if self.scheme == "engquist-osher":
            Ap, Am = self.split(u)
            return Ap[..., :-1] + Am[..., 1:]
        Au = self.flux.A1(u)
        return 0.5 * (Au[..., :-1] + Au[..., 1:]) - 0.5 * self.lf_speed * np.diff(u, axis=-1)

    def pair(self, u, v):
        """F(u, v) for arrays of left/right states."""
        u, v = np.asarray(u, float), np.asarray(v, float)
        if self.scheme == "engquist-osher":
            return self.split(u)[0] + self.split(v)[1]
        return 0.5 * (self.flux.A1(u) + self.flux.A1(v)) - 0.5 * self.lf_speed * (v - u)


# ------------------------------------------------------------------ FV scheme


def fv_step(u, config: SolverConfig, flux: FluxModel, noise: NoiseModel, increments,
            numflux: NumericalFlux | None = None, dt: float | None = None, step: int = 0) -> np.ndarray:
    """One Euler-Maruyama finite-volume step for a batch of fields (..., N).

    ``increments`` has shape (..., K).  Boundary faces carry zero total flux.
    """
    u = np.asarray(u, dtype=float)
    N = u.shape[-1]
    dx = 1.0 / N
    if dt is None:
        dt = config.plan(flux).dt
    elif dt > config.cfl_limit(flux) / config.cfl_safety * (1 + 1e-12):
        raise CFLError(dt, config.cfl_limit(flux))
    nf = numflux or NumericalFlux(flux, config.flux_scheme)
    if np.any(u < flux.a_lo - 1.0) or np.any(u > flux.b_hi + 1.0):
        warnings.warn("flux evaluated outside [a-1, b+1]", FluxDomainWarning, stacklevel=2)
    total = nf.faces(u) - config.eps * np.diff(u, axis=-1) / dx
    F = np.zeros(u.shape[:-1] + (N + 1,))
    F[..., 1:-1] = total
    new = u - (dt / dx) * (F[..., 1:] - F[..., :-1])
    if noise.K:
        inc = np.asarray(increments, dtype=float)
        spatial = noise.spatial((np.arange(N) + 0.5) / N)  # (N, K)
        kick = np.zeros_like(u)
        for k in range(noise.K):
            kick = kick + spatial[:, k] * inc[..., k, None]
        new = new + noise.bump(u) * kick
    if not np.all(np.isfinite(new)):
        raise DivergenceError(step)
    if config.clip_to_bounds:
        new = np.clip(new, flux.a_lo, flux.b_hi)
    return new


# ------------------------------------------------------------------ trajectory


SERIES = ("mass", "l2", "min", "max", "grad_energy")


@dataclass
class TrajectoryRecord:
    """Snapshots, per-step series (index 0 is the initial state) and the driving path."""

    config: SolverConfig
    plan: StepPlan
    u0: np.ndarray
    path: PathRecord
    series: dict[str, np.ndarray]
    snapshots: np.ndarray  # (n_snapshots + 1, R, N)
    states: np.ndarray | None = None  # (n_steps + 1, R, N) when kept
    overshoot_count: int = 0
    backend: str = "finite-volume"
    extra: dict = field(default_factory=dict)

    @property
    def grid(self) -> Grid1D:
        return self.config.grid

    @property
    def times(self) -> np.ndarray:
        return self.plan.times

    @property
    def snapshot_times(self) -> np.ndarray:
        return self.plan.snapshot_steps * self.plan.dt

    @property
    def replicas(self) -> int:
        return self.snapshots.shape[1]

    @property
    def final(self) -> np.ndarray:
        return self.snapshots[-1]

    def require_states(self) -> np.ndarray:
        if self.states is None:
            raise ValueError("trajectory was run without keep_states=True")
        return self.states


def _initial_field(u0, grid: Grid1D, R: int) -> np.ndarray:
    if isinstance(u0, InitialData):
        base = u0(grid.centers)
    else:
        base = np.asarray(u0, dtype=float)
    if base.shape[-1] != grid.N:
        raise ValueError(f"initial field has {base.shape[-1]} cells, grid has {grid.N}")
    return np.broadcast_to(base, (R, grid.N)).copy()


def _series_of(u, grid: Grid1D, eps: float) -> dict[str, np.ndarray]:
    return {"mass": grid.mass(u), "l2": np.sqrt(grid.l2sq(u)), "min": u.min(axis=-1),
            "max": u.max(axis=-1), "grad_energy": eps * grid.grad_sq(u)}


def _run_chunk(u, config, flux, noise, inc, plan, keep_states, observers=()):
    grid = config.grid
    obs_state = [ob.begin(u.shape[0], config, plan) for ob in observers]
    nf = NumericalFlux(flux, config.flux_scheme)
    R = u.shape[0]
    series = {k: np.empty((plan.n_steps + 1, R)) for k in SERIES}
    snaps = np.empty((plan.n_snapshots + 1, R, grid.N))
    states = np.empty((plan.n_steps + 1, R, grid.N)) if keep_states else None
    every = plan.n_steps // plan.n_snapshots
    lo, hi = flux.a_lo - 1e-8, flux.b_hi + 1e-8
    over = 0

    def record(j, v):
        for k, val in _series_of(v, grid, config.eps).items():
            series[k][j] = val
        if j % every == 0:
            snaps[j // every] = v
        if states is not None:
            states[j] = v
        for ob, st in zip(observers, obs_state):
            ob.update(st, j, v)

    record(0, u)
    for j in range(plan.n_steps):
        u = fv_step(u, config, flux, noise, inc[j], numflux=nf, dt=plan.dt, step=j)
        over += int(np.count_nonzero((u < lo) | (u > hi)))
        record(j + 1, u)
    return series, snaps, states, over, obs_state


def simulate(u0, config: SolverConfig, flux: FluxModel, noise: NoiseModel, path: PathRecord,
             keep_states: bool = False, threads: int = 1, observers=()) -> TrajectoryRecord:
    """Run the chosen backend over the whole path; output is independent of ``threads``.

    ``observers`` see every state as it is produced.  Each provides
    ``begin(R, config, plan) -> state``, ``update(state, step, u)`` and
    ``finish(list_of_chunk_states)``; results land in ``record.extra[name]``.
    """
    plan = config.plan(flux)
    if path.n_steps != plan.n_steps or not math.isclose(path.dt, plan.dt, rel_tol=1e-12):
        raise ValueError(f"path has {path.n_steps} steps of {path.dt}, plan needs {plan.n_steps} of {plan.dt}")
    if config.backend == "mild":
        traj, _ = fixed_point_solve(u0, config, flux, noise, path)
        return traj
    grid = config.grid
    R = len(path.replicas)
    u = _initial_field(u0, grid, R)
    inc = path.increments
    if threads <= 1 or R == 1:
        parts = [_run_chunk(u, config, flux, noise, inc, plan, keep_states, observers)]
    else:
        bounds = np.linspace(0, R, min(threads, R) + 1).astype(int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futs = [pool.submit(_run_chunk, u[a:b], config, flux, noise, inc[:, a:b], plan, keep_states,
                                observers)
                    for a, b in zip(bounds[:-1], bounds[1:])]
            parts = [f.result() for f in futs]
    series = {k: np.concatenate([p[0][k] for p in parts], axis=1) for k in SERIES}
    snaps = np.concatenate([p[1] for p in parts], axis=1)
    states = np.concatenate([p[2] for p in parts], axis=1) if keep_states else None
    over = sum(p[3] for p in parts)
    if over:
        warnings.warn(f"{over} cell values left [a, b] by more than 1e-8", RuntimeWarning, stacklevel=2)
    extra = {ob.name: ob.finish([p[4][i] for p in parts]) for i, ob in enumerate(observers)}
    return TrajectoryRecord(config, plan, u[0].copy(), path, series, snaps, states, over, extra=extra)


def _record_from_states(states, config, plan, path, u0, backend="mild", extra=None) -> TrajectoryRecord:
    grid = config.grid
    series = _series_of(states, grid, config.eps)
    every = plan.n_steps // plan.n_snapshots
    snaps = states[::every].copy()
    over = 0
    return TrajectoryRecord(config, plan, np.asarray(u0), path, series, snaps, states, over, backend, extra or {})


# ---------------------------------------------------------------- mild backend


class MildOperators:
    """Precomputed modal operators for the mild map on an N-cell grid (N modes)."""

    def __init__(self, config: SolverConfig, flux: FluxModel, noise: NoiseModel):
        self.config, self.flux, self.noise = config, flux, noise
        grid = config.grid
        self.N = grid.N
        self.n_modes = grid.N
        phi_faces = spectral.basis(self.n_modes, grid.faces)  # (modes, N+1)
        # weak pairing int A phi_n' for A piecewise constant on cells
        self.pair_matrix = (phi_faces[:, 1:] - phi_faces[:, :-1]).T.copy()  # (N, modes)
        self.spatial = noise.spatial(grid.centers) if noise.K else None  # (N, K)

    def flux_values(self, v):
        """A on the cells with the flux set to zero outside [a, b].

        A vanishes at both ends of the invariant interval, so this extension is
        globally Lipschitz with constant sup|a| on [a, b] and leaves solutions
        inside [a, b] untouched; it keeps Picard iterates from blowing up.
        """
        return self.flux.A1(np.clip(v, self.flux.a_lo, self.flux.b_hi))

    def transport_forcing(self, A_cells):
        """(-div A(v))_n and the boundary part phi_n(0)(A.nu)(0) + phi_n(1)(A.nu)(1).

        Their sum is the weak pairing int A phi_n' dx, so the boundary terms of
        the divergence and of the corrector cancel exactly.
        """
        weak = A_cells @ self.pair_matrix
        bnd = spectral.boundary_forcing(-A_cells[..., 0], A_cells[..., -1], self.n_modes)
        return weak - bnd, bnd

    def noise_modes(self, v):
        """Psi_{n,k}(v): cosine coefficients of g_k(., v(.)), shape (..., modes, K)."""
        g = self.spatial * self.noise.bump(v)[..., None]  # (..., N, K)
        return np.swapaxes(spectral.to_modes(np.swapaxes(g, -1, -2), self.n_modes), -1, -2)


def _states_of(v) -> np.ndarray:
    return v.require_states() if isinstance(v, TrajectoryRecord) else np.asarray(v, dtype=float)


def mild_iterate(v, config: SolverConfig, flux: FluxModel, noise: NoiseModel, path: PathRecord,
                 u0=None, ops: MildOperators | None = None) -> TrajectoryRecord:
    """One application of K to the state history ``v`` (record or array (n_steps+1, R, N)).

    The four summands are advanced together by one exponential-integrator
    recurrence; :func:`mild_components` returns them separately.
    """
    plan = config.plan(flux)
    vs = _states_of(v)
    if vs.shape[0] != plan.n_steps + 1 or vs.shape[-1] != config.N:
        raise ValueError(f"state history {vs.shape} does not match grid/time plan")
    if u0 is None:
        u0 = v.u0 if isinstance(v, TrajectoryRecord) else vs[0]
    ops = ops or MildOperators(config, flux, noise)
    R = vs.shape[1]
    u_init = _initial_field(u0, config.grid, R) if not (isinstance(u0, np.ndarray) and u0.ndim == 2) else u0
    lam = spectral.eigenvalues(ops.n_modes)
    z = config.eps * lam * plan.dt
    decay = np.exp(-z)
    gain = plan.dt * spectral._phi1(z)
    y = spectral.to_modes(u_init, ops.n_modes)
    out = np.empty((plan.n_steps + 1, R, config.N))
    out[0] = spectral.to_grid(y, config.N)
    for j in range(plan.n_steps):
        adv, bnd = ops.transport_forcing(ops.flux_values(vs[j]))
        kick = 0.0
        if noise.K:
            kick = np.einsum("rnk,rk->rn", ops.noise_modes(vs[j]), path.increments[j])
        y = decay * (y + kick) + gain * (adv + bnd)
        out[j + 1] = spectral.to_grid(y, config.N)
    return _record_from_states(out, config, plan, path, u_init[0])


def mild_components(v, config: SolverConfig, flux: FluxModel, noise: NoiseModel, path: PathRecord,
                    u0=None) -> dict[str, np.ndarray]:
    """The summands of K(v) as modal paths, each computed by the spectral module."""
    plan = config.plan(flux)
    vs = _states_of(v)
    if u0 is None:
        u0 = v.u0 if isinstance(v, TrajectoryRecord) else vs[0]
    ops = MildOperators(config, flux, noise)
    R = vs.shape[1]
    y0 = spectral.to_modes(_initial_field(u0, config.grid, R), ops.n_modes)
    times = plan.times
    lam = spectral.eigenvalues(ops.n_modes)
    free = np.exp(-config.eps * lam * times[:, None, None]) * y0
    A = ops.flux_values(vs[:-1])
    adv, _ = ops.transport_forcing(A)
    transport = spectral.duhamel(spectral.SpectralPath(times, adv), config.eps).values
    corrector = spectral.boundary_corrector(times, -A[..., 0], A[..., -1], config.eps, ops.n_modes).values
    if noise.K:
        psi = ops.noise_modes(vs[:-1])
        stoch = spectral.stochastic_convolution(spectral.SpectralPath(times, psi), path.increments,
                                                config.eps).values
    else:
        stoch = np.zeros_like(free)
    return {"semigroup": free, "transport": transport, "stochastic": stoch, "corrector": corrector}


def heat_history(u0, config: SolverConfig, plan: StepPlan, R: int) -> np.ndarray:
    """S(t_j) u0 on the grid for every step (Picard starting point)."""
    y0 = spectral.to_modes(_initial_field(u0, config.grid, R))
    lam = spectral.eigenvalues(config.N)
    modes = np.exp(-config.eps * lam * plan.times[:, None, None]) * y0
    return spectral.to_grid(modes, config.N)


# ------------------------------------------------------------------- *E norm


def star_profile(diff_states, dx: float, eps: float, dt: float, rule: str = "trapezoid") -> np.ndarray:
    """t_j -> E{ sup_{s<=t_j} ||d(s)||^2 + eps int_0^{t_j} ||grad d||^2 } for d of shape (steps+1, R, N)."""
    d = np.asarray(diff_states, dtype=float)
    l2 = np.sum(d * d, axis=-1) * dx
    running = np.maximum.accumulate(l2, axis=0)
    g = eps * np.sum(np.diff(d, axis=-1) ** 2, axis=-1) / dx
    cum = np.zeros_like(g)
    if rule == "trapezoid":
        cum[1:] = np.cumsum(0.5 * (g[1:] + g[:-1]) * dt, axis=0)
    else:  # left Riemann sum
        cum[1:] = np.cumsum(g[:-1] * dt, axis=0)
    return tree_mean(running + cum, axis=1)


def star_norm(traj1, traj2, C_star: float, alpha_w: float = 0.5, eps: float | None = None,
              dt: float | None = None) -> float:
    """Monte Carlo estimate of || traj1 - traj2 ||_{*E}.

    Accepts TrajectoryRecords (with states) or arrays (steps+1, R, N); for
    arrays ``eps`` and ``dt`` must be given.
    """
    s1, s2 = _states_of(traj1), _states_of(traj2)
    if s1.shape != s2.shape:
        raise ValueError(f"mismatched ensembles {s1.shape} vs {s2.shape}")
    if isinstance(traj1, TrajectoryRecord):
        eps = traj1.config.eps if eps is None else eps
        dt = traj1.plan.dt if dt is None else dt
    if eps is None or dt is None:
        raise ValueError("eps and dt are required for raw arrays")
    prof = star_profile(s1 - s2, 1.0 / s1.shape[-1], eps, dt)
    t = np.arange(len(prof)) * dt
    return float(math.sqrt(np.max(np.exp(-C_star * t / alpha_w) * prof)))


def calibrate_star_constant(pairs, config: SolverConfig, plan: StepPlan, safety: float = 2.0) -> dict:
    """C* from measured ratios LHS(t)/int_0^t R, where R is the input profile.

    ``pairs`` holds tuples (v1, v2, Kv1, Kv2) of state arrays.  The integral uses
    a left Riemann sum so that the weighted bound carries over to the grid.
    """
    dx = 1.0 / config.N
    worst = 0.0
    for v1, v2, k1, k2 in pairs:
        r = star_profile(_states_of(v1) - _states_of(v2), dx, config.eps, plan.dt)
        lhs = star_profile(_states_of(k1) - _states_of(k2), dx, config.eps, plan.dt)
        integral = np.concatenate([[0.0], np.cumsum(r[:-1]) * plan.dt])
        ok = integral > 0
        if np.any(ok):
            worst = max(worst, float(np.max(lhs[ok] / integral[ok])))
    return {"measured": worst, "C_star": safety * worst, "safety": safety}


def fixed_point_solve(u0, config: SolverConfig, flux: FluxModel, noise: NoiseModel, path: PathRecord,
                      tol: float = 1e-10, max_iter: int = 200, C_star: float = 0.0,
                      alpha_w: float = 0.5) -> tuple[TrajectoryRecord, list[float]]:
    """Picard iteration v_{m+1} = K(v_m) from v_0 = S(t) u0 until the *E distance drops below tol."""
    if tol <= 0:
        raise DomainError("tolerance must be positive")
    plan = config.plan(flux)
    R = len(path.replicas)
    ops = MildOperators(config, flux, noise)
    v = heat_history(u0, config, plan, R)
    u_init = _initial_field(u0, config.grid, R)
    history: list[float] = []
    for _ in range(max_iter):
        nxt = mild_iterate(v, config, flux, noise, path, u0=u_init, ops=ops)
        d = star_norm(nxt.states, v, C_star, alpha_w, config.eps, plan.dt)
        history.append(d)
        v = nxt.states
        if d < tol:
            nxt.extra["iterations"] = len(history)
            nxt.extra["distances"] = list(history)
            return nxt, history
    raise ConvergenceError(history)


# ------------------------------------------------------------------- energy


@dataclass(frozen=True)
class EnergyReport:
    lhs: float
    rhs: float
    constant: float
    sup_l2: float
    dissipation: float


def energy_report(traj: TrajectoryRecord, min_replicas: int = 16) -> EnergyReport:
    """lhs = E sup_t ||u||^2 + 2 eps E int ||grad u||^2, rhs = ||u0||^2 + 1."""
    if traj.replicas < min_replicas:
        raise ValueError(f"energy report needs >= {min_replicas} replicas, got {traj.replicas}")
    sup = tree_mean(np.max(traj.series["l2"] ** 2, axis=0))
    diss = tree_mean(np.sum(traj.series["grad_energy"][:-1], axis=0) * traj.plan.dt)
    lhs = float(sup + 2.0 * diss)
    rhs = float(traj.grid.l2sq(np.asarray(traj.u0)) + 1.0)
    return EnergyReport(lhs, rhs, lhs / rhs, float(sup), float(diss))


def with_overrides(config: SolverConfig, **kw) -> SolverConfig:
    return replace(config, **kw)
