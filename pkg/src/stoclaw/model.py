"""Structural data of the problem: flux, entropy pairs, noise coefficients, initial data.

Everything here is immutable after construction.  The builtin flux family is

    A_i(u) = (u - a)^(l_i + 1) (u - b)^(l_i + 1) / (l_i + 1)

and the builtin noise family is

    g_k(x, u) = alpha_k / (1 + k pi) * cos(k pi x) * b_M(u),

with b_M a polynomial bump supported on (-M, M) whose slope never exceeds 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy import integrate


class DomainError(ValueError):
    """Argument outside the domain where an operation is defined."""


class AccuracyError(RuntimeError):
    """A numerical quadrature could not reach the requested tolerance."""

    def __init__(self, message: str, achieved: float):
        super().__init__(f"{message} (achieved tolerance {achieved:.3e})")
        self.achieved = achieved


class ModelValidationError(ValueError):
    """Raised by :func:`validate_model` when a structural hypothesis fails."""

    def __init__(self, report: "ValidationReport"):
        failed = [c.name for c in report.checks if not c.passed]
        super().__init__("model hypotheses violated: " + ", ".join(failed))
        self.report = report
        self.failed = failed


# --------------------------------------------------------------------------- flux


@dataclass(frozen=True)
class FluxModel:
    """Flux ``A: R -> R^d`` with derivative ``a = A'`` and invariant interval [a_lo, b_hi].

    ``coeffs`` holds one ascending coefficient tuple per component for the
    polynomial kinds; the callable kind stores ``A_fn`` / ``a_fn`` instead.
    """

    kind: str
    a_lo: float
    b_hi: float
    L0: float
    coeffs: tuple[tuple[float, ...], ...] = ()
    exponents: tuple[int, ...] = ()
    A_fn: Callable | None = field(default=None, compare=False, repr=False)
    a_fn: Callable | None = field(default=None, compare=False, repr=False)
    dim: int = 1

    def __post_init__(self):
        if not self.a_lo < self.b_hi:
            raise DomainError("need a_lo < b_hi")
        if not (-self.L0 < self.a_lo and self.b_hi < self.L0):
            raise DomainError(f"[{self.a_lo}, {self.b_hi}] must lie inside (-L0, L0) with L0={self.L0}")
        if self.kind in ("example-family", "polynomial"):
            object.__setattr__(self, "dim", len(self.coeffs))
        elif self.kind == "tabulated-callable":
            if self.A_fn is None or self.a_fn is None:
                raise ValueError("callable flux needs both A_fn and a_fn")
        else:
            raise ValueError(f"unknown flux kind {self.kind!r}")

    # -- constructors -------------------------------------------------------
    @classmethod
    def example(cls, exponents: Sequence[int] = (1,), a_lo: float = -1.0, b_hi: float = 1.0,
                L0: float | None = None) -> "FluxModel":
        exps = tuple(int(l) for l in exponents)
        if any(l < 1 for l in exps):
            raise ValueError("exponents must be positive integers")
        base = Polynomial([-a_lo, 1.0]) * Polynomial([-b_hi, 1.0])
        coeffs = tuple(tuple((base ** (l + 1) / (l + 1)).coef.tolist()) for l in exps)
        if L0 is None:
            L0 = max(abs(a_lo), abs(b_hi)) + 0.1
        return cls("example-family", float(a_lo), float(b_hi), float(L0), coeffs, exps)

    @classmethod
    def polynomial(cls, coeffs: Sequence[Sequence[float]] | Sequence[float], a_lo: float = -1.0,
                   b_hi: float = 1.0, L0: float | None = None) -> "FluxModel":
        """Polynomial flux from ascending coefficients (one list per component)."""
        if len(coeffs) and np.isscalar(coeffs[0]):
            coeffs = [coeffs]
        cs = tuple(tuple(float(c) for c in comp) for comp in coeffs)
        if L0 is None:
            L0 = max(abs(a_lo), abs(b_hi)) + 0.1
        return cls("polynomial", float(a_lo), float(b_hi), float(L0), cs)

    @classmethod
    def from_callable(cls, A: Callable, a: Callable, dim: int = 1, a_lo: float = -1.0,
                      b_hi: float = 1.0, L0: float | None = None) -> "FluxModel":
        if L0 is None:
            L0 = max(abs(a_lo), abs(b_hi)) + 0.1
        return cls("tabulated-callable", float(a_lo), float(b_hi), float(L0), A_fn=A, a_fn=a, dim=dim)

    # -- evaluation ---------------------------------------------------------
    @property
    def is_polynomial(self) -> bool:
        return self.kind != "tabulated-callable"

    @property
    def polys(self) -> list[Polynomial]:
        if not self.is_polynomial:
            raise DomainError("callable flux has no polynomial representation")
        return [Polynomial(c) for c in self.coeffs]

    @property
    def dpolys(self) -> list[Polynomial]:
        return [p.deriv() for p in self.polys]

    def A(self, u):
        """Flux value(s); trailing axis of length ``dim``."""
        u = np.asarray(u, dtype=float)
        if self.is_polynomial:
            return np.stack([np.polynomial.polynomial.polyval(u, c) for c in self.coeffs], axis=-1)
        return np.asarray(self.A_fn(u), dtype=float).reshape(u.shape + (self.dim,))

    def a(self, u):
        u = np.asarray(u, dtype=float)
        if self.is_polynomial:
            return np.stack([p(u) for p in self.dpolys], axis=-1)
        return np.asarray(self.a_fn(u), dtype=float).reshape(u.shape + (self.dim,))

    def A1(self, u):
        """First component only, same shape as ``u`` (the 1-D solver's flux)."""
        return self.A(u)[..., 0]

    def a1(self, u):
        return self.a(u)[..., 0]

    def max_speed(self, lo: float | None = None, hi: float | None = None, samples: int = 4001) -> float:
        """sup |a| over [lo, hi] (default the invariant interval)."""
        lo = self.a_lo if lo is None else lo
        hi = self.b_hi if hi is None else hi
        if self.is_polynomial:
            best = 0.0
            for p in self.dpolys:
                pts = [lo, hi]
                if p.degree() >= 1:
                    r = p.deriv().roots()
                    pts += [x.real for x in np.atleast_1d(r) if abs(x.imag) < 1e-12 and lo <= x.real <= hi]
                best = max(best, float(np.max(np.abs(p(np.array(pts))))))
            return best
        xs = np.linspace(lo, hi, samples)
        return float(np.max(np.abs(self.a(xs))))


def flux_eval(flux: FluxModel, u: float, want_derivative: bool = False) -> np.ndarray:
    """A(u) (or a(u) when ``want_derivative``) as a length-``dim`` vector."""
    if not np.isfinite(u):
        raise DomainError(f"non-finite state {u!r}")
    out = flux.a(float(u)) if want_derivative else flux.A(float(u))
    return np.atleast_1d(out)


# --------------------------------------------------------------------- entropies


@dataclass(frozen=True)
class EntropyPair:
    """Convex entropy ``eta`` with flux ``q(u) = int_0^u a(s) eta'(s) ds``.

    kind is ``quadratic`` (u^2/2), ``kruzhkov`` (|u - c| with a quadratic cap of
    half-width ``delta``) or ``custom`` (callables; ``dpoly`` optionally gives
    eta' as ascending polynomial coefficients so q has a closed form).
    """

    kind: str = "quadratic"
    c: float = 0.0
    delta: float = 1e-3
    eta_fn: Callable | None = field(default=None, compare=False, repr=False)
    deta_fn: Callable | None = field(default=None, compare=False, repr=False)
    d2eta_fn: Callable | None = field(default=None, compare=False, repr=False)
    dpoly: tuple[float, ...] | None = None

    @classmethod
    def quadratic(cls) -> "EntropyPair":
        return cls("quadratic")

    @classmethod
    def kruzhkov(cls, c: float, delta: float = 1e-3) -> "EntropyPair":
        if delta <= 0:
            raise DomainError("smoothing width must be positive")
        return cls("kruzhkov", c=float(c), delta=float(delta))

    @classmethod
    def custom(cls, eta, deta, d2eta, dpoly: Sequence[float] | None = None) -> "EntropyPair":
        return cls("custom", eta_fn=eta, deta_fn=deta, d2eta_fn=d2eta,
                   dpoly=None if dpoly is None else tuple(float(c) for c in dpoly))

    def eta(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "quadratic":
            return 0.5 * u * u
        if self.kind == "kruzhkov":
            z = u - self.c
            return np.where(np.abs(z) >= self.delta, np.abs(z), z * z / (2 * self.delta) + self.delta / 2)
        return np.asarray(self.eta_fn(u), dtype=float)

    def deta(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "quadratic":
            return u
        if self.kind == "kruzhkov":
            return np.clip((u - self.c) / self.delta, -1.0, 1.0)
        return np.asarray(self.deta_fn(u), dtype=float)

    def d2eta(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "quadratic":
            return np.ones_like(u)
        if self.kind == "kruzhkov":
            return np.where(np.abs(u - self.c) < self.delta, 1.0 / self.delta, 0.0)
        return np.asarray(self.d2eta_fn(u), dtype=float)

    def deta_pieces(self) -> list[tuple[float, float, Polynomial]] | None:
        """eta' as a list of (lo, hi, polynomial) pieces, or None if not piecewise polynomial."""
        inf = math.inf
        if self.kind == "quadratic":
            return [(-inf, inf, Polynomial([0.0, 1.0]))]
        if self.kind == "kruzhkov":
            c, d = self.c, self.delta
            return [(-inf, c - d, Polynomial([-1.0])),
                    (c - d, c + d, Polynomial([-c / d, 1.0 / d])),
                    (c + d, inf, Polynomial([1.0]))]
        if self.dpoly is not None:
            return [(-inf, inf, Polynomial(self.dpoly))]
        return None


def _entropy_flux_closed(pieces, flux: FluxModel, u) -> np.ndarray:
    """q(u) = int_0^u a eta' by exact integration of each polynomial piece; shape u.shape + (d,)."""
    u = np.asarray(u, dtype=float)
    out = np.zeros(u.shape + (flux.dim,))
    for i, dp in enumerate(flux.dpolys):
        for p_lo, p_hi, piece in pieces:
            prim = (dp * piece).integ()
            out[..., i] += prim(np.clip(u, p_lo, p_hi)) - prim(np.clip(0.0, p_lo, p_hi))
    return out


def entropy_flux(pair: EntropyPair, flux: FluxModel, u) -> np.ndarray:
    """Vectorised q(u) for piecewise-polynomial eta' and polynomial flux."""
    pieces = pair.deta_pieces()
    if pieces is None or not flux.is_polynomial:
        u = np.asarray(u, dtype=float)
        flat = np.array([entropy_pair_eval(pair, flux, float(v))[1] for v in u.ravel()])
        return flat.reshape(u.shape + (flux.dim,))
    return _entropy_flux_closed(pieces, flux, u)


def entropy_pair_eval(pair: EntropyPair, flux: FluxModel, u: float, tol: float = 1e-12):
    """Return ``(eta(u), q(u))`` with q a length-``dim`` vector and q(0) = 0."""
    if not np.isfinite(u):
        raise DomainError(f"non-finite state {u!r}")
    pieces = pair.deta_pieces()
    eta_u = float(pair.eta(u))
    if pieces is not None and flux.is_polynomial:
        return eta_u, _entropy_flux_closed(pieces, flux, float(u))
    q = np.zeros(flux.dim)
    pts = [pair.c - pair.delta, pair.c + pair.delta] if pair.kind == "kruzhkov" else None
    pts = [p for p in (pts or []) if min(0.0, u) < p < max(0.0, u)] or None
    for i in range(flux.dim):
        val, err = integrate.quad(lambda s: float(flux.a(s)[i] * pair.deta(s)), 0.0, float(u),
                                  epsabs=tol, epsrel=0.0, limit=200, points=pts)
        if not err <= tol:
            raise AccuracyError("entropy flux quadrature failed", err)
        q[i] = val
    return eta_u, q


# ------------------------------------------------------------------------ noise


def bump_constant(M: float) -> float:
    """Scale c so that sup |d/du c (1 - (u/M)^2)^3| equals 1."""
    # max of 6 s (1 - s^2)^2 on [0, 1] is attained at s = 1/sqrt(5)
    return M * 25.0 * math.sqrt(5.0) / 96.0


@dataclass(frozen=True)
class NoiseModel:
    """Truncated family g_k(x, u), k = 1..K, with envelope constants alpha_k."""

    K: int = 8
    alpha: tuple[float, ...] = ()
    M: float = 0.5
    profile: str = "cosine"

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be non-negative")
        if not self.alpha:
            object.__setattr__(self, "alpha", tuple(0.2 * 2.0 ** (-k) for k in range(1, self.K + 1)))
        if len(self.alpha) != self.K:
            raise ValueError("need one alpha per mode")
        if any(a <= 0 for a in self.alpha):
            raise ValueError("alpha_k must be positive")
        if self.M <= 0:
            raise ValueError("M must be positive")
        if self.profile not in ("cosine", "uniform"):
            raise ValueError(f"unknown spatial profile {self.profile!r}")

    @classmethod
    def default(cls, K: int = 8, alpha_scale: float = 0.2, M: float = 0.5, profile: str = "cosine"):
        return cls(K, tuple(alpha_scale * 2.0 ** (-k) for k in range(1, K + 1)), M, profile)

    @classmethod
    def off(cls) -> "NoiseModel":
        return cls(K=0, alpha=(), M=0.5)

    @property
    def D(self) -> float:
        return 4.0 * sum(a * a for a in self.alpha)

    @property
    def c_bump(self) -> float:
        return bump_constant(self.M)

    def bump(self, u):
        s = np.asarray(u, dtype=float) / self.M
        return np.where(np.abs(s) < 1.0, self.c_bump * (1.0 - s * s) ** 3, 0.0)

    def dbump(self, u):
        s = np.asarray(u, dtype=float) / self.M
        return np.where(np.abs(s) < 1.0, -6.0 * self.c_bump * s * (1.0 - s * s) ** 2 / self.M, 0.0)

    def _modes(self):
        k = np.arange(1, self.K + 1, dtype=float)
        return k, np.asarray(self.alpha) / (1.0 + k * np.pi)

    def spatial(self, x):
        """Spatial factor per mode, shape x.shape + (K,)."""
        x = np.asarray(x, dtype=float)[..., None]
        k, amp = self._modes()
        if self.profile == "cosine":
            return amp * np.cos(k * np.pi * x)
        return amp * np.ones_like(x * k)

    def dspatial(self, x):
        x = np.asarray(x, dtype=float)[..., None]
        k, amp = self._modes()
        if self.profile == "cosine":
            return -amp * k * np.pi * np.sin(k * np.pi * x)
        return np.zeros_like(x * k)

    def g(self, x, u):
        """g_k(x, u); trailing axis indexes k (broadcast over x and u)."""
        return self.spatial(x) * self.bump(u)[..., None]

    def dg_dx(self, x, u):
        return self.dspatial(x) * self.bump(u)[..., None]

    def dg_du(self, x, u):
        return self.spatial(x) * self.dbump(u)[..., None]

    def G2(self, x, u):
        return np.sum(self.g(x, u) ** 2, axis=-1)


def noise_eval(noise: NoiseModel, x: float, u: float):
    """Return (g_1..g_K at (x, u), G^2(x, u))."""
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"x={x} outside [0, 1]")
    g = noise.g(x, u)
    return g, float(np.sum(g * g))


# ----------------------------------------------------------------- initial data


@dataclass(frozen=True)
class InitialData:
    """Initial profile sampled at cell centres.

    profiles: ``constant`` (value), ``step`` (left, right, x0), ``bump``
    (base, amp, center, width; polynomial bump (1 - r^2)^4), ``cosine``
    (mean, amp, freq) and ``tabulated`` (values on a uniform cell grid,
    interpolated linearly).
    """

    profile: str = "bump"
    params: tuple[float, ...] = (-0.6, 1.4, 0.5, 0.35)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.profile == "constant":
            return np.full_like(x, p[0])
        if self.profile == "step":
            left, right, x0 = p
            return np.where(x < x0, left, right)
        if self.profile == "bump":
            base, amp, center, width = p
            r = (x - center) / width
            return base + amp * np.where(np.abs(r) < 1.0, (1.0 - r * r) ** 4, 0.0)
        if self.profile == "cosine":
            mean, amp, freq = p
            return mean + amp * np.cos(freq * np.pi * x)
        if self.profile == "tabulated":
            vals = np.asarray(p, dtype=float)
            xs = (np.arange(len(vals)) + 0.5) / len(vals)
            return np.interp(x, xs, vals)
        raise ValueError(f"unknown initial profile {self.profile!r}")

    def scaled(self, factor: float, about: float = 0.0) -> "InitialData":
        """Profile ``about + factor * (u0 - about)`` (amplitude scaling)."""
        x = (np.arange(512) + 0.5) / 512
        vals = about + factor * (self(x) - about)
        return InitialData("tabulated", tuple(vals.tolist()))


# ------------------------------------------------------------------- validation


@dataclass(frozen=True)
class HypothesisCheck:
    name: str
    description: str
    passed: bool
    margin: float  # worst-case slack; negative when violated


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[HypothesisCheck, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        return [f"{c.name}: {'pass' if c.passed else 'FAIL'} margin={c.margin:.3e}  ({c.description})"
                for c in self.checks]


def validate_model(flux: FluxModel, noise: NoiseModel, u0: InitialData | None = None,
                   n_check: int = 257, n_pairs: int = 10_000, seed: int = 0,
                   raise_on_fail: bool = True) -> ValidationReport:
    """Check the structural hypotheses numerically; raise before any simulation if one fails."""
    checks = []
    a, b = flux.a_lo, flux.b_hi
    scale = max(1.0, float(np.max(np.abs(flux.A(np.linspace(a, b, 101))))))
    endpoint = float(np.max(np.abs(np.concatenate([flux.A(a), flux.A(b)]))))
    checks.append(HypothesisCheck("flux_endpoint_zeros", "A(a) = A(b) = 0",
                                  endpoint <= 1e-12 * scale, 1e-12 * scale - endpoint))

    inside = min(-noise.M - a, b - noise.M)
    checks.append(HypothesisCheck("noise_support_in_range", "(-M, M) contained in [a, b]",
                                  inside >= 0, inside))

    if noise.K:
        x = np.linspace(0.0, 1.0, n_check)
        xi = np.linspace(-1.5 * noise.M, 1.5 * noise.M, n_check)
        X, XI = np.meshgrid(x, xi, indexing="ij")
        env = (np.abs(noise.g(X, 0.0)) + np.abs(noise.dg_dx(X, XI)) + np.abs(noise.dg_du(X, XI)))
        env_margin = float(np.min(np.asarray(noise.alpha) - env.reshape(-1, noise.K).max(axis=0)))
        checks.append(HypothesisCheck("noise_envelope", "|g_k(x,0)| + |d_x g_k| + |d_u g_k| <= alpha_k",
                                      env_margin >= -1e-15, env_margin))

        us = np.linspace(-2 * max(abs(a), abs(b)), 2 * max(abs(a), abs(b)), n_check)
        X, U = np.meshgrid(x, us, indexing="ij")
        growth = float(np.min(noise.D * (1 + U ** 2) - noise.G2(X, U)))
        checks.append(HypothesisCheck("noise_growth", "G^2(x,u) <= D (1 + u^2)", growth >= 0, growth))

        rng = np.random.default_rng(seed)
        x1, x2 = rng.uniform(0, 1, (2, n_pairs))
        u1, u2 = rng.uniform(a, b, (2, n_pairs))
        lhs = np.sum((noise.g(x1, u1) - noise.g(x2, u2)) ** 2, axis=-1)
        rhs = noise.D * ((x1 - x2) ** 2 + (u1 - u2) ** 2)
        lip = float(np.min(rhs - lhs))
        checks.append(HypothesisCheck("noise_lipschitz", "sum |g_k(x,u) - g_k(y,v)|^2 <= D(|x-y|^2 + |u-v|^2)",
                                      lip >= 0, lip))

        outside = np.concatenate([np.linspace(noise.M, 2 * noise.M + 1, 50), -np.linspace(noise.M, 2 * noise.M + 1, 50)])
        X, U = np.meshgrid(x, outside, indexing="ij")
        leak = float(np.max(np.abs(noise.g(X, U))))
        checks.append(HypothesisCheck("noise_compact_support", "g_k(x, u) = 0 for |u| >= M", leak == 0.0, -leak))

    if u0 is not None:
        xs = (np.arange(4096) + 0.5) / 4096
        vals = u0(xs)
        rng_margin = float(min(np.min(vals) - a, b - np.max(vals)))
        checks.append(HypothesisCheck("initial_range", "a <= u0(x) <= b", rng_margin >= 0, rng_margin))

    report = ValidationReport(tuple(checks))
    if raise_on_fail and not report.passed:
        raise ModelValidationError(report)
    return report
