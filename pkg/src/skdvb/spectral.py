"""Fourier-Galerkin representation of real, mean-zero fields on the torus.

A field is stored through its coefficients on the positive modes
``n = 1..N``; the negative modes are the complex conjugates and the mean
mode is identically zero, so every stored field is real by construction.
All array routines accept leading batch axes, which is how ensembles of
paths are advanced together.

Conventions
-----------
* ``u(x) = sum_{0<|n|<=N} c_n exp(i n x)`` with ``c_{-n} = conj(c_n)``.
* Norms count both signs of ``n``: a field with ``c_1 = 1`` has
  ``||u||_{L2} = sqrt(2)``.
* The linear symbol of the equation is ``-n^2 + i n^3``; the propagator is
  ``exp(-n^2 |t| + i n^3 t)``.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

DEFAULT_COEFFICIENT = -1.0


def bracket(x) -> np.ndarray:
    """Japanese bracket ``(1 + |x|^2)^(1/2)``; accepts complex input."""
    return np.sqrt(1.0 + np.abs(x) ** 2)


def default_points(n_modes: int) -> int:
    """Smallest FFT-friendly grid size that multiplies two fields exactly."""
    return sfft.next_fast_len(3 * n_modes + 1, real=True)


@dataclass(frozen=True)
class TorusGrid:
    """Truncation level and collocation grid on the 2*pi torus.

    ``n_points`` defaults to the smallest fast FFT length with
    ``n_points >= 3 * n_modes + 1``, the size at which the quadratic
    nonlinearity is free of aliasing.
    """

    n_modes: int
    n_points: int = 0

    def __post_init__(self):
        if int(self.n_modes) != self.n_modes or self.n_modes < 1:
            raise ValueError(f"n_modes must be a positive integer, got {self.n_modes!r}")
        object.__setattr__(self, "n_modes", int(self.n_modes))
        if not self.n_points:
            object.__setattr__(self, "n_points", default_points(self.n_modes))
        if self.n_points < 2 * self.n_modes + 1:
            raise ValueError(
                f"n_points={self.n_points} cannot represent {self.n_modes} modes "
                f"(need at least {2 * self.n_modes + 1})"
            )

    @property
    def dealiased(self) -> bool:
        return self.n_points >= 3 * self.n_modes + 1

    @property
    def wavenumbers(self) -> np.ndarray:
        return np.arange(1, self.n_modes + 1)

    @property
    def x(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_points) / self.n_points


@dataclass(frozen=True)
class SpectralField:
    """Positive-mode coefficients of a real mean-zero field.

    ``coeffs`` has shape ``(..., N)``; index ``k`` holds mode ``n = k + 1``.
    """

    grid: TorusGrid
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.ndim == 0 or c.shape[-1] != self.grid.n_modes:
            raise ValueError(
                f"coefficient array of shape {c.shape} does not match N={self.grid.n_modes}"
            )
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, grid: TorusGrid, batch: tuple[int, ...] = ()) -> SpectralField:
        return cls(grid, np.zeros(batch + (grid.n_modes,), dtype=np.complex128))

    @classmethod
    def from_modes(cls, grid: TorusGrid, modes: Mapping[int, complex]) -> SpectralField:
        """Build a field from ``{n: c_n}``; negative keys are conjugated onto ``-n``."""
        c = np.zeros(grid.n_modes, dtype=np.complex128)
        for n, value in modes.items():
            if n == 0 or abs(n) > grid.n_modes:
                raise ValueError(f"mode {n} outside 0<|n|<={grid.n_modes}")
            c[abs(n) - 1] = value if n > 0 else np.conj(value)
        return cls(grid, c)

    @property
    def a(self) -> np.ndarray:
        return self.coeffs.real

    @property
    def b(self) -> np.ndarray:
        return self.coeffs.imag

    def full_spectrum(self) -> np.ndarray:
        """Coefficients on modes ``-N..N`` (mean included as 0)."""
        c = self.coeffs
        zero = np.zeros(c.shape[:-1] + (1,), dtype=c.dtype)
        return np.concatenate([np.conj(c[..., ::-1]), zero, c], axis=-1)

    def __add__(self, other: SpectralField) -> SpectralField:
        _check_same_grid(self.grid, other.grid)
        return SpectralField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other: SpectralField) -> SpectralField:
        _check_same_grid(self.grid, other.grid)
        return SpectralField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, scalar: float) -> SpectralField:
        return SpectralField(self.grid, self.coeffs * float(scalar))

    __rmul__ = __mul__

    def __neg__(self) -> SpectralField:
        return SpectralField(self.grid, -self.coeffs)


@dataclass(frozen=True)
class MultiplierOp:
    """Diagonal Fourier operator ``c_n -> m_n c_n``.

    Only ``m_n`` for ``n > 0`` is stored; the operator acts on ``-n`` with
    ``conj(m_n)`` so it maps real fields to real fields.
    """

    symbol: np.ndarray = field(repr=False)
    kind: str = "custom"

    def __post_init__(self):
        m = np.asarray(self.symbol)
        if m.ndim != 1:
            raise ValueError("multiplier symbol must be one-dimensional")
        if self.kind == "phi":
            if np.iscomplexobj(m) and np.any(m.imag != 0):
                raise ValueError("smoothing operator symbols must be real")
            m = m.real.astype(np.float64)
        else:
            m = m.astype(np.complex128)
        object.__setattr__(self, "symbol", m)

    @property
    def n_modes(self) -> int:
        return self.symbol.shape[0]

    def __call__(self, f: SpectralField) -> SpectralField:
        return apply_multiplier(self, f)

    def compose(self, other: MultiplierOp) -> MultiplierOp:
        if other.n_modes != self.n_modes:
            raise ValueError("cannot compose multipliers of different truncation")
        kind = self.kind if self.kind == other.kind else "custom"
        return MultiplierOp(self.symbol * other.symbol, kind)

    @classmethod
    def identity(cls, grid: TorusGrid) -> MultiplierOp:
        return cls(np.ones(grid.n_modes), "custom")

    @classmethod
    def derivative(cls, grid: TorusGrid, order: int = 1) -> MultiplierOp:
        return cls((1j * grid.wavenumbers) ** order, "derivative")

    @classmethod
    def projection(cls, grid: TorusGrid, cutoff: int) -> MultiplierOp:
        return cls((grid.wavenumbers <= cutoff).astype(float), "projection")


def _check_same_grid(g1: TorusGrid, g2: TorusGrid) -> None:
    if g1.n_modes != g2.n_modes:
        raise ValueError(f"grid mismatch: N={g1.n_modes} vs N={g2.n_modes}")


def apply_multiplier(op: MultiplierOp, f: SpectralField) -> SpectralField:
    if op.n_modes != f.grid.n_modes:
        raise ValueError(f"grid mismatch: operator has N={op.n_modes}, field N={f.grid.n_modes}")
    return SpectralField(f.grid, op.symbol * f.coeffs)


def linear_symbol(n_modes: int) -> np.ndarray:
    """``-n^2 + i n^3`` for ``n = 1..N``."""
    n = np.arange(1, n_modes + 1, dtype=np.float64)
    return -(n**2) + 1j * n**3


def semigroup_symbol(n_modes: int, t: float) -> np.ndarray:
    n = np.arange(1, n_modes + 1, dtype=np.float64)
    return np.exp(-(n**2) * abs(t) + 1j * n**3 * t)


def semigroup(t: float, grid: TorusGrid) -> MultiplierOp:
    """Linear propagator ``exp(-n^2|t| + i n^3 t)``, two-sided in ``t``."""
    return MultiplierOp(semigroup_symbol(grid.n_modes, t), "semigroup")


def dispersion_symbol(n_modes: int, t: float) -> np.ndarray:
    """Phase-only part ``exp(i n^3 t)`` of the propagator."""
    n = np.arange(1, n_modes + 1, dtype=np.float64)
    return np.exp(1j * n**3 * t)


def synthesize(coeffs: np.ndarray, n_points: int) -> np.ndarray:
    """Physical values on ``n_points`` equispaced nodes from positive-mode coefficients."""
    n_modes = coeffs.shape[-1]
    spec = np.zeros(coeffs.shape[:-1] + (n_points // 2 + 1,), dtype=np.complex128)
    spec[..., 1 : n_modes + 1] = coeffs * n_points
    return sfft.irfft(spec, n=n_points, axis=-1)


def analyze(values: np.ndarray, n_modes: int) -> np.ndarray:
    """Positive-mode coefficients ``1..n_modes`` of sampled real values."""
    n_points = values.shape[-1]
    spec = sfft.rfft(values, axis=-1)
    return spec[..., 1 : n_modes + 1] / n_points


def to_physical(f: SpectralField) -> np.ndarray:
    return synthesize(f.coeffs, f.grid.n_points)


def from_physical(values, grid: TorusGrid) -> SpectralField:
    """Project samples onto modes ``0<|n|<=N``, discarding the mean."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape[-1] != grid.n_points:
        raise ValueError(f"expected {grid.n_points} samples, got {v.shape[-1]}")
    return SpectralField(grid, analyze(v, grid.n_modes))


def nonlinear_term(coeffs: np.ndarray, n_points: int, coefficient: float = DEFAULT_COEFFICIENT) -> np.ndarray:
    """``coefficient * P_N d/dx (u^2)`` on raw coefficient arrays.

    Exact (alias-free) whenever ``n_points >= 3N + 1``.
    """
    n_modes = coeffs.shape[-1]
    u = synthesize(coeffs, n_points)
    square = analyze(u * u, n_modes)
    return (coefficient * 1j) * np.arange(1, n_modes + 1) * square


def nonlinearity(f: SpectralField, coefficient: float = DEFAULT_COEFFICIENT) -> SpectralField:
    if not f.grid.dealiased:
        raise ValueError(
            f"grid with n_points={f.grid.n_points} aliases quadratic products; "
            f"need n_points >= {3 * f.grid.n_modes + 1}"
        )
    return SpectralField(f.grid, nonlinear_term(f.coeffs, f.grid.n_points, coefficient))


def direct_convolution(coeffs: np.ndarray) -> np.ndarray:
    """Reference ``sum_{n1+n2=n} c_{n1} c_{n2}`` for ``n = 1..N`` by explicit summation.

    Quadratic cost; intended for cross-checking the transform route.
    """
    c = np.asarray(coeffs, dtype=np.complex128)
    n_modes = c.shape[-1]
    full = SpectralField(TorusGrid(n_modes), c).full_spectrum()  # index j <-> mode j - N
    out = np.zeros_like(c)
    for n in range(1, n_modes + 1):
        n1 = np.arange(n - n_modes, n_modes + 1)
        n1 = n1[(n1 != 0) & (n1 != n)]
        out[..., n - 1] = np.sum(full[..., n1 + n_modes] * full[..., n - n1 + n_modes], axis=-1)
    return out


def weighted_sum_sq(coeffs: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """``sum_{0<|n|<=N} w_n |c_n|^2`` along the last axis (both signs counted)."""
    return 2.0 * np.sum(weight * (coeffs.real**2 + coeffs.imag**2), axis=-1)


def l2_sq(coeffs: np.ndarray) -> np.ndarray:
    return 2.0 * np.sum(coeffs.real**2 + coeffs.imag**2, axis=-1)


def h1_sq(coeffs: np.ndarray) -> np.ndarray:
    """Squared homogeneous ``H^1`` seminorm."""
    n = np.arange(1, coeffs.shape[-1] + 1, dtype=np.float64)
    return weighted_sum_sq(coeffs, n**2)


def sobolev_weight(n_modes: int, s: float, homogeneous: bool = False) -> np.ndarray:
    n = np.arange(1, n_modes + 1, dtype=np.float64)
    return n ** (2 * s) if homogeneous else (1.0 + n**2) ** s


def sobolev_norm(f: SpectralField | np.ndarray, s: float, homogeneous: bool = False):
    """``(sum <n>^{2s} |c_n|^2)^{1/2}``, or with ``|n|^{2s}`` when ``homogeneous``."""
    c = f.coeffs if isinstance(f, SpectralField) else np.asarray(f)
    return np.sqrt(weighted_sum_sq(c, sobolev_weight(c.shape[-1], s, homogeneous)))
