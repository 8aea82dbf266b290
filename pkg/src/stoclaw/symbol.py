"""Sublevel sets of the kinetic symbol tau + a(xi) . kappa.

For a polynomial flux the map xi -> tau + a(xi).kappa is a polynomial.  Its
critical points split (-L0, L0) into monotone pieces, and on each piece the set
{|p| <= delta} is a single interval whose ends are found by bisection, so the
measure is exact up to floating point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from numpy.polynomial import Polynomial
from scipy import optimize

from .model import DomainError, FluxModel


# ------------------------------------------------------------ root isolation


def _trim(p: Polynomial, rel: float = 1e-13) -> Polynomial:
    c = np.array(p.coef, dtype=float)
    scale = max(np.max(np.abs(c)), 1e-300)
    nz = np.nonzero(np.abs(c) > rel * scale)[0]
    return Polynomial(c[: nz[-1] + 1]) if len(nz) else Polynomial([0.0])


def sturm_sequence(p: Polynomial) -> list[Polynomial]:
    p = _trim(p)
    seq = [p, _trim(p.deriv())]
    while seq[-1].degree() > 0 or abs(seq[-1].coef[0]) > 0:
        if seq[-1].degree() == 0:
            break
        _, r = divmod(seq[-2], seq[-1])
        r = _trim(-r, rel=1e-11)
        if r.degree() == 0 and abs(r.coef[0]) <= 1e-11 * max(1.0, np.max(np.abs(seq[-2].coef))):
            break
        # normalise to keep coefficients O(1)
        seq.append(r / np.max(np.abs(r.coef)))
    return seq


def _sign_changes(seq, x: float) -> int:
    vals = [q(x) for q in seq]
    signs = [v for v in vals if v != 0.0]
    return sum(1 for a, b in zip(signs, signs[1:]) if (a > 0) != (b > 0))


def isolate_real_roots(p: Polynomial, lo: float, hi: float, tol: float = 1e-12) -> np.ndarray:
    """Distinct real roots of p in (lo, hi), via Sturm counts and count-based bisection.

    Counting distinct roots (rather than sign changes of p) handles roots of even
    multiplicity.  Falls back to eigenvalue roots if the sequence is inconsistent.
    """
    p = _trim(p)
    if p.degree() <= 0:
        return np.array([])
    seq = sturm_sequence(p)
    total = _sign_changes(seq, lo) - _sign_changes(seq, hi)
    if total < 0 or total > p.degree():
        return _fallback_roots(p, lo, hi)
    roots: list[float] = []
    stack = [(lo, hi, total)]
    while stack:
        a, b, c = stack.pop()
        if c <= 0:
            continue
        if b - a < tol:
            roots.append(0.5 * (a + b))
            continue
        m = 0.5 * (a + b)
        cm = _sign_changes(seq, m)
        left = _sign_changes(seq, a) - cm
        stack.append((m, b, c - left))
        stack.append((a, m, left))
    roots = sorted(roots)
    return np.array([r for r in roots if lo < r < hi])


def _horner(coef: np.ndarray, x):
    out = np.zeros_like(x) + coef[-1]
    for c in coef[-2::-1]:
        out = out * x + c
    return out


def _fallback_roots(p: Polynomial, lo: float, hi: float) -> np.ndarray:
    r = np.atleast_1d(p.roots())
    r = np.sort(r[np.abs(r.imag) < 1e-7].real)
    return r[(r > lo) & (r < hi)]


# -------------------------------------------------------------- sublevel sets


class MonotonePieces:
    """Breakpoints of a polynomial on [lo, hi] such that it is monotone between them."""

    def __init__(self, p: Polynomial, lo: float, hi: float):
        self.p = p
        self.coef = np.array(p.coef, dtype=float)
        crit = isolate_real_roots(p.deriv(), lo, hi) if p.degree() >= 2 else np.array([])
        self.points = np.concatenate([[lo], crit, [hi]])
        self.values = p(self.points)

    @property
    def critical_values(self) -> np.ndarray:
        return self.values[1:-1]

    def _inverse(self, level: np.ndarray, seg: int, iters: int = 48) -> np.ndarray:
        """Point in segment ``seg`` where p equals ``level`` (level already clamped)."""
        x0, x1 = self.points[seg], self.points[seg + 1]
        y0, y1 = self.values[seg], self.values[seg + 1]
        a = np.full_like(level, x0)
        b = np.full_like(level, x1)
        sign = 1.0 if y1 >= y0 else -1.0
        c = self.coef
        target = sign * level
        for _ in range(iters):
            m = 0.5 * (a + b)
            go_right = sign * _horner(c, m) < target
            a = np.where(go_right, m, a)
            b = np.where(go_right, b, m)
        out = 0.5 * (a + b)
        out = np.where(level == y0, x0, out)
        return np.where(level == y1, x1, out)

    def _inverse_scalar(self, level: float, seg: int) -> float:
        x0, x1 = self.points[seg], self.points[seg + 1]
        y0, y1 = self.values[seg], self.values[seg + 1]
        if level == y0:
            return float(x0)
        if level == y1:
            return float(x1)
        c = self.coef.tolist()[::-1]

        def f(x):
            acc = 0.0
            for ci in c:
                acc = acc * x + ci
            return acc - level

        f0, f1 = f(x0), f(x1)
        if f0 == 0.0 or f1 == 0.0 or (f0 > 0) == (f1 > 0):
            # level sits at an endpoint up to rounding
            return float(x0 if abs(f0) <= abs(f1) else x1)
        return optimize.brentq(f, x0, x1, xtol=1e-15, rtol=1e-15, maxiter=200)

    def measure(self, tau, level) -> np.ndarray:
        """|{xi : |tau + p(xi)| <= level}| for arrays of tau (level broadcast)."""
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        level = np.broadcast_to(np.asarray(level, dtype=float), tau.shape)
        total = np.zeros_like(tau)
        for s in range(len(self.points) - 1):
            y0, y1 = self.values[s], self.values[s + 1]
            ymin, ymax = min(y0, y1), max(y0, y1)
            lo_lvl = np.clip(-level - tau, ymin, ymax)
            hi_lvl = np.clip(level - tau, ymin, ymax)
            active = (hi_lvl > lo_lvl) & (level >= 0)
            if not np.any(active):
                continue
            if ymax == ymin:  # constant piece
                total += np.where(np.abs(tau + y0) <= level, self.points[s + 1] - self.points[s], 0.0)
                continue
            if tau.size == 1:
                if active[0]:
                    total += abs(self._inverse_scalar(float(hi_lvl[0]), s) - self._inverse_scalar(float(lo_lvl[0]), s))
                continue
            xa = self._inverse(lo_lvl, s)
            xb = self._inverse(hi_lvl, s)
            total += np.where(active, np.abs(xb - xa), 0.0)
        return total


def symbol_polynomial(flux: FluxModel, kappa) -> Polynomial:
    """xi -> a(xi) . kappa as a polynomial (no constant shift)."""
    kappa = np.atleast_1d(np.asarray(kappa, dtype=float))
    if len(kappa) != flux.dim:
        raise DomainError(f"direction has {len(kappa)} components, flux has {flux.dim}")
    total = Polynomial([0.0])
    for k, dp in zip(kappa, flux.dpolys):
        total = total + k * dp
    return total


@dataclass(frozen=True)
class SymbolQuery:
    """One sublevel query.  With ``epsilon > 0`` the direction is a wave vector n
    (not normalised) and the parabolic symbol i(tau + a.n) + eps|n|^2 is used."""

    flux: FluxModel
    tau: float
    kappa: tuple[float, ...]
    delta: float
    L0: float | None = None
    epsilon: float = 0.0

    def __post_init__(self):
        if not self.delta > 0:
            raise DomainError("delta must be positive")
        k = np.asarray(self.kappa, dtype=float)
        if self.epsilon == 0.0 and abs(np.linalg.norm(k) - 1.0) > 1e-12:
            raise DomainError("kappa must be a unit vector for the hyperbolic symbol")
        if self.epsilon < 0:
            raise DomainError("epsilon must be non-negative")

    @property
    def half_width(self) -> float:
        return self.flux.L0 if self.L0 is None else self.L0


def omega_set_measure(q: SymbolQuery, pieces: MonotonePieces | None = None) -> float:
    """Lebesgue measure of {xi in (-L0, L0) : |L| <= delta}."""
    L0 = q.half_width
    level = q.delta
    if q.epsilon > 0:
        n2 = float(np.sum(np.square(q.kappa)))
        arg = q.delta ** 2 - q.epsilon ** 2 * n2 ** 2
        if arg < 0:
            return 0.0
        level = math.sqrt(arg)
    if not q.flux.is_polynomial:
        return sampled_measure(lambda x: q.tau + q.flux.a(x) @ np.asarray(q.kappa, float), level, L0)[0]
    pieces = pieces or MonotonePieces(symbol_polynomial(q.flux, q.kappa), -L0, L0)
    return float(pieces.measure(q.tau, level)[0])


def sampled_measure(fn, level: float, L0: float, n: int = 10_000_000, chunk: int = 1_000_000):
    """Dense midpoint-sampling estimate and its resolution (one bin width)."""
    width = 2 * L0 / n
    count = 0
    for start in range(0, n, chunk):
        idx = np.arange(start, min(n, start + chunk))
        x = -L0 + (idx + 0.5) * width
        count += int(np.count_nonzero(np.abs(fn(x)) <= level))
    return count * width, width


def sampled_sup_measure(values: np.ndarray, delta: float, L0: float) -> float:
    """sup over tau of the sampled measure, given sorted samples of a(xi).kappa on a uniform grid.

    The best window [c - delta, c + delta] can be taken with its left end at a sample.
    """
    v = np.sort(values)
    width = 2 * L0 / len(values)
    hi = np.searchsorted(v, v + 2 * delta, side="right")
    return float(np.max(hi - np.arange(len(v))) * width)


# ----------------------------------------------------------- sup over (tau, kappa)


def _tau_candidates(pieces: MonotonePieces, delta: float) -> np.ndarray:
    ends = pieces.values[[0, -1]]
    crit = pieces.critical_values
    c = np.concatenate([crit, ends])
    return np.unique(np.concatenate([-c - delta, -c + delta, -crit]))


def sup_over_tau(pieces: MonotonePieces, delta: float, scan: int = 201) -> tuple[float, float]:
    """(max measure, argmax tau) over candidates, a uniform scan and local refinement."""
    span = np.max(np.abs(pieces.values))
    taus = np.concatenate([_tau_candidates(pieces, delta),
                           np.linspace(-span - delta, span + delta, scan)])
    vals = pieces.measure(taus, delta)
    i = int(np.argmax(vals))
    best, tau_best = float(vals[i]), float(taus[i])
    step = 2 * (span + delta) / (scan - 1)
    res = optimize.minimize_scalar(lambda t: -float(pieces.measure(t, delta)[0]),
                                   bounds=(tau_best - step, tau_best + step), method="bounded",
                                   options={"xatol": 1e-10 * max(1.0, span)})
    if -res.fun > best:
        best, tau_best = float(-res.fun), float(res.x)
    return best, tau_best


def _directions(d: int, count: int) -> np.ndarray:
    if d == 1:
        return np.array([[1.0]])
    if d == 2:
        th = np.arange(count) * np.pi / count
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    if d == 3:
        # Fibonacci lattice on the upper hemisphere (kappa and -kappa are equivalent)
        i = np.arange(count) + 0.5
        z = i / count
        phi = np.pi * (1 + 5 ** 0.5) * i
        r = np.sqrt(1 - z * z)
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    raise DomainError("dense direction scans are limited to d <= 3")


@dataclass
class SupResult:
    value: float
    tau: float
    kappa: np.ndarray
    boundary_warning: bool = False


class SymbolAnalyzer:
    """Direction scan for the sup over the unit sphere.

    Every direction is ranked by a sampled proxy (sorted samples of a.kappa,
    so the best tau-window is found by counting); the leading candidates and the
    coordinate axes are then evaluated exactly and the best angle is refined.
    """

    def __init__(self, flux: FluxModel, L0: float | None = None, n_directions: int = 1000,
                 n_samples: int = 8001):
        if not flux.is_polynomial:
            raise DomainError("exact sublevel analysis needs a polynomial flux")
        self.flux = flux
        self.L0 = flux.L0 if L0 is None else float(L0)
        self.d = flux.dim
        self.n_scan = 1 if self.d == 1 else n_directions
        self.dirs = np.concatenate([_directions(self.d, n_directions), np.eye(self.d)]) if self.d > 1 \
            else np.array([[1.0]])
        xs = -self.L0 + (np.arange(n_samples) + 0.5) * (2 * self.L0 / n_samples)
        self._width = 2 * self.L0 / n_samples
        self._sorted = np.sort(flux.a(xs) @ self.dirs.T, axis=0)  # (samples, dirs)
        self._cache: dict[tuple, MonotonePieces] = {}

    def pieces(self, kappa) -> MonotonePieces:
        key = tuple(np.round(np.asarray(kappa, float), 15))
        if key not in self._cache:
            self._cache[key] = MonotonePieces(symbol_polynomial(self.flux, kappa), -self.L0, self.L0)
        return self._cache[key]

    def proxy(self, delta: float) -> np.ndarray:
        """Sampled sup over tau for every scanned direction."""
        out = np.empty(self._sorted.shape[1])
        idx = np.arange(self._sorted.shape[0])
        for j in range(len(out)):
            v = self._sorted[:, j]
            out[j] = np.max(np.searchsorted(v, v + 2 * delta, side="right") - idx) * self._width
        return out

    def _angle_sup(self, th: float, delta: float) -> float:
        return sup_over_tau(self.pieces([math.cos(th), math.sin(th)]), delta)[0]

    def sup_measure(self, delta: float, top: int = 4) -> SupResult:
        """sup over tau and |kappa| = 1 of the sublevel measure."""
        if not delta > 0:
            raise DomainError("delta must be positive")
        if self.d == 1:
            v, t = sup_over_tau(self.pieces([1.0]), delta)
            return SupResult(v, t, np.array([1.0]))
        cheap = self.proxy(delta)
        order = np.argsort(-cheap, kind="stable")
        axes = range(len(self.dirs) - self.d, len(self.dirs))
        chosen = list(dict.fromkeys([int(i) for i in order[:top]] + list(axes)))
        best = SupResult(-1.0, 0.0, self.dirs[0])
        for i in chosen:
            v, t = sup_over_tau(self.pieces(self.dirs[i]), delta)
            if v > best.value:
                best = SupResult(v, t, self.dirs[i])
        if self.d != 2:
            return best
        width = 2 * np.pi / self.n_scan
        th0 = math.atan2(best.kappa[1], best.kappa[0])
        res = optimize.minimize_scalar(lambda th: -self._angle_sup(th, delta),
                                       bounds=(th0 - width, th0 + width), method="bounded",
                                       options={"xatol": 1e-7})
        if -res.fun > best.value:
            k = np.array([math.cos(res.x), math.sin(res.x)])
            v, t = sup_over_tau(self.pieces(k), delta)
            best = SupResult(v, t, k, bool(abs(res.x - th0) > 0.98 * width))
        return best


def sup_sphere_measure(flux: FluxModel, delta: float, L0: float | None = None,
                       n_directions: int = 1000) -> SupResult:
    return SymbolAnalyzer(flux, L0, n_directions).sup_measure(delta)


# --------------------------------------------------------------------- fits


@dataclass
class SymbolReport:
    deltas: np.ndarray
    sup_measures: np.ndarray
    argmax_tau: np.ndarray
    argmax_kappa: np.ndarray
    alpha_hat: float
    intercept: float
    residual: float
    excluded: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def fit_power_law(deltas, measures) -> tuple[float, float, float, list[float]]:
    """Least-squares slope/intercept of log measure vs log delta and RMS log residual."""
    deltas = np.asarray(deltas, float)
    measures = np.asarray(measures, float)
    keep = measures > 0
    excluded = deltas[~keep].tolist()
    x, y = np.log(deltas[keep]), np.log(measures[keep])
    slope, icpt = np.polyfit(x, y, 1)
    resid = float(np.sqrt(np.mean((y - (slope * x + icpt)) ** 2)))
    return float(slope), float(icpt), resid, excluded


def exponent_fit(flux: FluxModel, delta_grid, L0: float | None = None,
                 n_directions: int = 1000) -> SymbolReport:
    """Fitted decay exponent of sup_{tau,kappa} |Omega(tau, kappa; delta)|."""
    deltas = np.sort(np.asarray(delta_grid, float))
    if len(deltas) < 8 or deltas[-1] / deltas[0] < 100 * (1 - 1e-9):
        raise DomainError("delta grid must span at least two decades with at least 8 points")
    an = SymbolAnalyzer(flux, L0, n_directions)
    res = [an.sup_measure(float(d)) for d in deltas]
    meas = np.array([r.value for r in res])
    slope, icpt, resid, excluded = fit_power_law(deltas, meas)
    warn = [f"direction refinement hit its window edge at delta={d:.3e}"
            for d, r in zip(deltas, res) if r.boundary_warning]
    return SymbolReport(deltas, meas, np.array([r.tau for r in res]), np.array([r.kappa for r in res]),
                        slope, icpt, resid, excluded, warn)


# --------------------------------------------------------------- conditions


def _lattice_band(J: int, d: int) -> np.ndarray:
    """Integer vectors with J/2 <= |n| <= 2J (one of each +-n pair)."""
    r = int(2 * J)
    rng = range(-r, r + 1)
    pts = np.array(list(product(rng, repeat=d)), dtype=float)
    nrm = np.linalg.norm(pts, axis=1)
    pts = pts[(nrm >= J / 2) & (nrm <= 2 * J)]
    # keep one representative of each +-n pair: first non-zero coordinate positive
    first = np.array([row[np.nonzero(row)[0][0]] for row in pts])
    return pts[first > 0]


@dataclass
class ConditionReport:
    alpha: float
    beta: float
    omega: dict  # (J, delta) -> omega_L(J, delta)
    omega_ratio: dict  # (J, delta) -> omega * (J^beta / delta)^alpha
    lxi_ratio: dict  # J -> sup_band |a'(xi).n| / J
    lxi_bound: float
    zero_set_null: bool
    zero_set_trials: int

    @property
    def max_omega_ratio(self) -> float:
        return max(self.omega_ratio.values())

    @property
    def max_lxi_ratio(self) -> float:
        return max(self.lxi_ratio.values())


def omega_band(flux: FluxModel, J: int, delta: float, L0: float | None = None) -> float:
    """omega_L(J, delta) = sup over tau and lattice n with |n| ~ J of |Omega_L(tau, n; delta)|.

    Uses |Omega(tau, n; delta)| = |Omega(tau/|n|, n/|n|; delta/|n|)|; for each
    direction only the shortest lattice vector in the band matters.
    """
    L0 = flux.L0 if L0 is None else L0
    pts = _lattice_band(J, flux.dim)
    nrm = np.linalg.norm(pts, axis=1)
    dirs = pts / nrm[:, None]
    # shortest representative per direction
    key = np.round(dirs, 12)
    order = np.argsort(nrm, kind="stable")
    seen: dict = {}
    for i in order:
        k = tuple(key[i])
        if k not in seen:
            seen[k] = i
    best = 0.0
    for i in seen.values():
        p = MonotonePieces(symbol_polynomial(flux, dirs[i]), -L0, L0)
        v, _ = sup_over_tau(p, delta / nrm[i], scan=201)
        best = max(best, v)
    return best


def gh_conditions(flux: FluxModel, J_list, delta_list, L0: float | None = None, alpha: float | None = None,
                  beta: float = 1.0, trials: int = 100, seed: int = 0) -> ConditionReport:
    """Band nondegeneracy ratios, the |L_xi| band bound and the null zero-set check."""
    L0 = flux.L0 if L0 is None else L0
    if alpha is None:
        alpha = 1.0 / max(flux.exponents) if flux.exponents else 1.0
    omega, ratio, lxi = {}, {}, {}
    xi = np.linspace(-L0, L0, 4001)
    d2 = np.stack([p.deriv()(xi) for p in flux.dpolys], axis=-1)
    sup_ad = float(np.max(np.linalg.norm(d2, axis=-1)))
    for J in J_list:
        for dl in delta_list:
            w = omega_band(flux, J, dl, L0)
            omega[(J, dl)] = w
            ratio[(J, dl)] = w * (J ** beta / dl) ** alpha
        pts = _lattice_band(J, flux.dim)
        lxi[J] = float(np.max(np.abs(d2 @ pts.T))) / J
    rng = np.random.default_rng(seed)
    null = True
    for _ in range(trials):
        tau = rng.normal()
        kappa = rng.normal(size=flux.dim)
        kappa /= np.linalg.norm(kappa)
        p = _trim(symbol_polynomial(flux, kappa) + tau)
        if p.degree() == 0 and abs(p.coef[0]) == 0.0:
            null = False
    return ConditionReport(alpha, beta, omega, ratio, lxi, 2.0 * sup_ad, null, trials)
