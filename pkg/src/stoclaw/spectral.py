"""Neumann heat semigroup on (0, 1) in the cosine basis phi_0 = 1, phi_n = sqrt(2) cos(n pi x).

Grid functions live at cell centres x_i = (i + 1/2)/N.  The map from cell values
to coefficients is the orthonormal DCT-II rescaled by 1/sqrt(N), which is the
midpoint-rule projection onto phi_n and is exactly Parseval-consistent with the
grid quadrature sum(h_i^2)/N.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft

from .model import DomainError


def eigenvalues(n_modes: int) -> np.ndarray:
    """lambda_n = (n pi)^2, n = 0..n_modes-1."""
    return (np.pi * np.arange(n_modes)) ** 2


def basis(n_modes: int, x) -> np.ndarray:
    """phi_n(x) with shape (n_modes,) + x.shape."""
    x = np.asarray(x, dtype=float)
    n = np.arange(n_modes).reshape((-1,) + (1,) * x.ndim)
    out = np.sqrt(2.0) * np.cos(n * np.pi * x)
    out[0] = 1.0
    return out


def to_modes(h, n_modes: int | None = None) -> np.ndarray:
    """Cell values (..., N) -> coefficients (..., n_modes)."""
    h = np.asarray(h, dtype=float)
    N = h.shape[-1]
    c = fft.dct(h, type=2, norm="ortho", axis=-1) / np.sqrt(N)
    if n_modes is None or n_modes == N:
        return c
    if n_modes < N:
        return c[..., :n_modes]
    pad = np.zeros(c.shape[:-1] + (n_modes - N,))
    return np.concatenate([c, pad], axis=-1)


def to_grid(coeffs, N: int | None = None) -> np.ndarray:
    """Coefficients (..., n_modes) -> cell values (..., N); inverse of :func:`to_modes`."""
    c = np.asarray(coeffs, dtype=float)
    n_modes = c.shape[-1]
    N = n_modes if N is None else N
    if n_modes > N:
        c = c[..., :N]
    elif n_modes < N:
        c = np.concatenate([c, np.zeros(c.shape[:-1] + (N - n_modes,))], axis=-1)
    return fft.idct(c * np.sqrt(N), type=2, norm="ortho", axis=-1)


@dataclass(frozen=True)
class SpectralField:
    """Cosine coefficients; leading axes (if any) are batch axes."""

    coeffs: np.ndarray

    @property
    def n_modes(self) -> int:
        return self.coeffs.shape[-1]

    @classmethod
    def from_grid(cls, h, n_modes: int | None = None) -> "SpectralField":
        return cls(to_modes(h, n_modes))

    @classmethod
    def mode(cls, n: int, n_modes: int, amplitude: float = 1.0) -> "SpectralField":
        c = np.zeros(n_modes)
        c[n] = amplitude
        return cls(c)

    def grid(self, N: int | None = None) -> np.ndarray:
        return to_grid(self.coeffs, N)

    def evaluate(self, x) -> np.ndarray:
        """Pointwise series value at arbitrary x (batch axes first)."""
        return np.tensordot(self.coeffs, basis(self.n_modes, x), axes=(-1, 0))

    def l2(self) -> np.ndarray:
        return np.sqrt(np.sum(self.coeffs ** 2, axis=-1))


@dataclass(frozen=True)
class SpectralPath:
    """Time grid plus per-time coefficients.

    For a forcing path, ``values[j]`` is the constant value on [t_j, t_{j+1}) so
    ``values`` has one entry fewer than ``times``.  For a solution path the two
    lengths agree.  ``increments`` (steps, ..., K) accompanies operator paths.
    """

    times: np.ndarray
    values: np.ndarray
    increments: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or len(t) < 1:
            raise DomainError("time grid must be a non-empty 1-D array")
        if np.any(np.diff(t) <= 0):
            raise DomainError("time grid must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def is_forcing(self) -> bool:
        return len(self.values) == len(self.times) - 1


def _phi1(z: np.ndarray) -> np.ndarray:
    """(1 - e^{-z}) / z with the removable singularity at 0."""
    small = np.abs(z) < 1e-8
    zs = np.where(small, 1.0, z)
    return np.where(small, 1.0 - z / 2.0, -np.expm1(-zs) / zs)


def semigroup_apply(h: SpectralField, t: float, eps: float) -> SpectralField:
    """S(t) h: damp mode n by exp(-eps lambda_n t)."""
    if t < 0:
        raise DomainError(f"negative time {t}")
    if eps <= 0:
        raise DomainError("viscosity must be positive")
    return SpectralField(h.coeffs * np.exp(-eps * eigenvalues(h.n_modes) * t))


def ha_norm(h: SpectralField, alpha: float) -> np.ndarray:
    """(sum (1 + lambda_n)^{2 alpha} h_n^2)^{1/2}; alpha = -1/2 gives the H^{-1} scale."""
    w = (1.0 + eigenvalues(h.n_modes)) ** (2.0 * alpha)
    return np.sqrt(np.sum(w * h.coeffs ** 2, axis=-1))


def grad_energy(h: SpectralField) -> np.ndarray:
    """||d/dx h||^2 of the cosine series (sum lambda_n h_n^2)."""
    return np.sum(eigenvalues(h.n_modes) * h.coeffs ** 2, axis=-1)


def smoothing_integral(h: SpectralField, T: float, eps: float) -> np.ndarray:
    """int_0^T ||grad S(t) h||^2 dt in closed form, sum_n h_n^2 (1 - e^{-2 eps lambda_n T}) / (2 eps)."""
    lam = eigenvalues(h.n_modes)
    return np.sum(h.coeffs ** 2 * (-np.expm1(-2 * eps * lam * T)), axis=-1) / (2 * eps)


def duhamel(hpath: SpectralPath, eps: float, y0: np.ndarray | None = None) -> SpectralPath:
    """(I h)(t_j) = int_0^{t_j} S(t_j - s) h(s) ds for piecewise-constant h, exact per mode.

    ``y0`` optionally adds S(t) y0 (used by the mild map for the initial datum).
    """
    if not hpath.is_forcing or len(hpath.values) == 0:
        raise DomainError("duhamel needs a non-empty piecewise-constant forcing path")
    vals = hpath.values
    lam = eigenvalues(vals.shape[-1])
    out = np.empty((len(hpath.times),) + vals.shape[1:])
    out[0] = 0.0 if y0 is None else y0
    for j, dt in enumerate(hpath.steps):
        z = eps * lam * dt
        out[j + 1] = np.exp(-z) * out[j] + dt * _phi1(z) * vals[j]
    return SpectralPath(hpath.times, out)


def duhamel_gain(n_modes: int, times, eps: float, alpha: float = 0.0) -> np.ndarray:
    """Per-mode operator norm of I from L^2(0,T; H^alpha) to L^2(0,T; H^{alpha+1}) on the step grid.

    Mode n of the discrete Duhamel map is a lower-triangular Toeplitz matrix
    acting on the step values; its spectral norm times (1 + lambda_n) is the
    exact gain for that mode.  The maximum over modes is the operator norm.
    """
    t = np.asarray(times, dtype=float)
    dts = np.diff(t)
    if len(dts) == 0:
        raise DomainError("need at least one step")
    if not np.allclose(dts, dts[0], rtol=1e-12, atol=0.0):
        raise DomainError("gain computation assumes a uniform step")
    dt = dts[0]
    lag = np.subtract.outer(np.arange(len(dts)), np.arange(len(dts)))
    gains = np.empty(n_modes)
    for n, lam in enumerate(eigenvalues(n_modes)):
        z = eps * lam * dt
        mat = np.where(lag >= 0, np.exp(-z * np.maximum(lag, 0)) * dt * _phi1(np.array(z)), 0.0)
        gains[n] = (1.0 + lam) * np.linalg.norm(mat, 2)
    return gains


def stochastic_convolution(psi_path: SpectralPath, increments, eps: float) -> SpectralPath:
    """(I_W Psi)(t_j) = sum_{i<j} S(t_j - t_i) Psi(t_i) dbeta(t_i).

    ``psi_path.values`` has shape (steps, ..., n_modes, K) and ``increments``
    shape (steps, ..., K); Psi is frozen at the left endpoint of every step.
    """
    psi = psi_path.values
    inc = np.asarray(increments, dtype=float)
    if not psi_path.is_forcing:
        raise DomainError("operator path must hold one value per step")
    if inc.shape[0] != psi.shape[0] or inc.shape[-1] != psi.shape[-1]:
        raise ValueError(f"increment shape {inc.shape} does not match operator path {psi.shape}")
    lam = eigenvalues(psi.shape[-2])
    out = np.zeros((len(psi_path.times),) + psi.shape[1:-1])
    for j, dt in enumerate(psi_path.steps):
        kick = np.einsum("...nk,...k->...n", psi[j], inc[j])
        out[j + 1] = np.exp(-eps * lam * dt) * (out[j] + kick)
    return SpectralPath(psi_path.times, out, inc)


def boundary_forcing(flux_nu_left, flux_nu_right, n_modes: int) -> np.ndarray:
    """Per-mode forcing phi_n(0) (A.nu)(0) + phi_n(1) (A.nu)(1) for given normal fluxes."""
    left = np.asarray(flux_nu_left, dtype=float)[..., None]
    right = np.asarray(flux_nu_right, dtype=float)[..., None]
    ends = basis(n_modes, np.array([0.0, 1.0]))
    return left * ends[:, 0] + right * ends[:, 1]


def boundary_corrector(times, flux_nu_left, flux_nu_right, eps: float, n_modes: int) -> SpectralPath:
    """w solving the heat equation with eps w_x . nu = A . nu on the boundary and w(0) = 0.

    ``flux_nu_left`` / ``flux_nu_right`` are per-step values of A(v) . nu at x = 0 and
    x = 1 (outward normals -1 and +1), constant on each step.
    """
    forcing = boundary_forcing(flux_nu_left, flux_nu_right, n_modes)
    return duhamel(SpectralPath(times, forcing), eps)
