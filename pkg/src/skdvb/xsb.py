"""Discrete Fourier restriction norms and numeric checks of the estimates
behind the local theory.

A :class:`SpaceTimeField` holds coefficients ``u_n(t_j)`` on a uniform time
grid. Its norm

    ||u||_{X^{s,b}}^2 = sum_n <n>^{2s} int <i(tau - n^3) + n^2>^{2b} |u~(n, tau)|^2 dtau

is evaluated by a zero-padded DFT of the samples multiplied by
``exp(-i n^3 t)``, i.e. on the frequency window of width ``2 pi / dt``
centred on the dispersion relation ``tau = n^3``. The time transform is
unitary, ``u~(tau) = (2 pi)^{-1/2} int exp(-i t tau) u(t) dt``, so ``b = 0``
reproduces the space-time L2 norm exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy import integrate as sint

from .spectral import analyze, bracket, synthesize

WINDOW_FACTOR = 4
PADDING = 4


@dataclass(frozen=True)
class SpaceTimeField:
    """Samples ``values[j, k] = u_{k+1}(j * dt)`` for ``j = 0..J-1``."""

    dt: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        if v.ndim != 2:
            raise ValueError("space-time samples must have shape (time, mode)")
        if not self.dt > 0:
            raise ValueError("time step must be positive")
        object.__setattr__(self, "values", v)

    @property
    def n_times(self) -> int:
        return self.values.shape[0]

    @property
    def n_modes(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_times)

    @property
    def horizon(self) -> float:
        return self.dt * (self.n_times - 1)

    def same_lattice(self, other: SpaceTimeField) -> bool:
        return self.values.shape == other.values.shape and np.isclose(self.dt, other.dt, rtol=1e-12, atol=0)

    def __add__(self, other):
        _check_lattice(self, other)
        return SpaceTimeField(self.dt, self.values + other.values)

    def __sub__(self, other):
        _check_lattice(self, other)
        return SpaceTimeField(self.dt, self.values - other.values)

    def cut(self, T: float) -> np.ndarray:
        """Samples multiplied by the indicator of ``[0, T]``."""
        if T < 0 or T > self.horizon * (1 + 1e-12) + 1e-300:
            raise ValueError(f"cutoff {T} lies outside the sampled window [0, {self.horizon}]")
        keep = self.times <= T * (1 + 1e-12)
        return self.values * keep[:, None]


def _check_lattice(u: SpaceTimeField, v: SpaceTimeField) -> None:
    if not u.same_lattice(v):
        raise ValueError("space-time fields live on different lattices")


def fft_length(n_samples: int, window: int = WINDOW_FACTOR, padding: int = PADDING) -> int:
    return sfft.next_fast_len(max(window * padding * n_samples, 1))


def co_moving_spectrum(samples: np.ndarray, dt: float, n_fft: int, first_mode: int = 1):
    """Unitary time transform of ``exp(-i n^3 t) u_n(t)``.

    Returns ``(sigma, spec)`` with ``spec[k, m] = u~(n, n^3 + sigma_k)`` for
    ``n = first_mode + m``.
    """
    n_times, n_modes = samples.shape
    n = np.arange(first_mode, first_mode + n_modes, dtype=np.float64)
    t = dt * np.arange(n_times)
    phase = np.exp(-1j * np.outer(t, n**3))
    spec = sfft.fft(samples * phase, n=n_fft, axis=0) * (dt / np.sqrt(2.0 * np.pi))
    sigma = 2.0 * np.pi * sfft.fftfreq(n_fft, d=dt)
    return sigma, spec


def xsb_norm(
    f: SpaceTimeField,
    s: float,
    b: float,
    T: float | None = None,
    n_fft: int | None = None,
    first_mode: int = 1,
) -> float:
    """Discrete ``X^{s,b}`` norm of ``chi_[0,T] f`` (no cutoff when ``T`` is None)."""
    samples = f.values if T is None else f.cut(T)
    used = f.n_times if T is None else int(np.count_nonzero(f.times <= T * (1 + 1e-12)))
    if n_fft is None:
        n_fft = fft_length(max(used, 1))
    if n_fft < f.n_times and np.any(samples[n_fft:]):
        raise ValueError("transform length shorter than the cut-off signal")
    sigma, spec = co_moving_spectrum(samples[:n_fft], f.dt, n_fft, first_mode)
    n = np.arange(first_mode, first_mode + f.n_modes, dtype=np.float64)
    dtau = 2.0 * np.pi / (n_fft * f.dt)
    weight = (1.0 + sigma[:, None] ** 2 + n[None, :] ** 4) ** b
    per_mode = np.sum(weight * (spec.real**2 + spec.imag**2), axis=0) * dtau
    return float(np.sqrt(2.0 * np.sum((1.0 + n**2) ** s * per_mode)))


def space_time_l2(f: SpaceTimeField, T: float | None = None) -> float:
    samples = f.values if T is None else f.cut(T)
    return float(np.sqrt(2.0 * f.dt * np.sum(np.abs(samples) ** 2)))


# --------------------------------------------------------------------------- products


def product_samples(u: SpaceTimeField, v: SpaceTimeField, T: float | None = None) -> SpaceTimeField:
    """``d/dx (u v)`` on modes ``1..2N`` by pointwise multiplication in space at every time sample."""
    _check_lattice(u, v)
    n_modes = u.n_modes
    out_modes = 2 * n_modes
    n_points = sfft.next_fast_len(2 * out_modes + 1, real=True)
    uu = u.values if T is None else u.cut(T)
    vv = v.values if T is None else v.cut(T)
    prod = synthesize(uu, n_points) * synthesize(vv, n_points)
    coeffs = analyze(prod, out_modes) * (1j * np.arange(1, out_modes + 1))
    return SpaceTimeField(u.dt, coeffs)


def _signed_index(k: np.ndarray, n_fft: int) -> np.ndarray:
    return ((k + n_fft // 2) % n_fft) - n_fft // 2


def product_norm_by_convolution(
    u: SpaceTimeField, v: SpaceTimeField, s: float, b: float, T: float, n_fft: int
) -> float:
    """``||d/dx(uv)||_{X^{s,b}}`` by an explicit double sum over ``(n_1, tau_k)``.

    Quadratic in the number of frequencies; intended as an independent
    check of :func:`product_samples`. Requires ``n_fft * dt`` to be a whole
    multiple of ``2 pi`` so that the dispersion relation lands on the grid.
    """
    _check_lattice(u, v)
    dt = u.dt
    periods = n_fft * dt / (2.0 * np.pi)
    if abs(periods - round(periods)) > 1e-9:
        raise ValueError("n_fft * dt must be a whole multiple of 2*pi for the convolution route")
    m = int(round(periods))
    N = u.n_modes
    uu, vv = u.cut(T), v.cut(T)
    scale = dt / np.sqrt(2.0 * np.pi)
    # lab-frame spectra for modes -N..N (index n + N), unitary normalisation
    def lab(x):
        pos = sfft.fft(x, n=n_fft, axis=0) * scale
        neg = np.conj(pos[(-np.arange(n_fft)) % n_fft])
        full = np.zeros((n_fft, 2 * N + 1), dtype=np.complex128)
        full[:, N + 1 :] = pos
        full[:, :N] = neg[:, ::-1]
        return full

    U, V = lab(uu), lab(vv)
    dtau = 1.0 / m
    k = np.arange(n_fft)
    total = 0.0
    for n in range(1, 2 * N + 1):
        acc = np.zeros(n_fft, dtype=np.complex128)
        for n1 in range(max(-N, n - N), min(N, n + N) + 1):
            n2 = n - n1
            if n1 == 0 or n2 == 0 or abs(n2) > N:
                continue
            a, c = U[:, n1 + N], V[:, n2 + N]
            # (a * c)(k) = sum_k1 a(k1) c(k - k1) dtau, circular on the DFT grid
            acc += np.array([np.sum(a * c[(kk - k) % n_fft]) for kk in k]) * dtau
        acc *= 1j * n / np.sqrt(2.0 * np.pi)
        sigma = _signed_index(k - n**3 * m, n_fft) * dtau
        weight = (1.0 + sigma**2 + n**4) ** b
        total += 2.0 * (1.0 + n**2) ** s * np.sum(weight * np.abs(acc) ** 2) * dtau
    return float(np.sqrt(total))


def bilinear_ratio(
    u: SpaceTimeField,
    v: SpaceTimeField,
    s: float,
    b: float,
    gamma: float,
    T: float,
    n_fft: int | None = None,
) -> float:
    """``||d/dx(uv)||_{X^{s,-1/2+gamma}_T} / (||u||_{X^{s,b}_T} ||v||_{X^{s,b}_T})``."""
    _check_lattice(u, v)
    du = xsb_norm(u, s, b, T, n_fft)
    dv = xsb_norm(v, s, b, T, n_fft)
    if du == 0.0 or dv == 0.0:
        raise ValueError("bilinear ratio undefined for a zero field")
    num = xsb_norm(product_samples(u, v, T), s, -0.5 + gamma, T, n_fft)
    return num / (du * dv)


def product_resolving_step(n_modes: int, oversample: float = 2.0) -> float:
    """Largest step that resolves ``exp(-3 i n n1 n2 t)`` for products of modes up to ``n_modes``."""
    return np.pi / (oversample * 6.0 * n_modes**3)


def random_field(
    n_modes: int,
    dt: float,
    n_times: int,
    rng: np.random.Generator,
    slope: float | None = None,
) -> SpaceTimeField:
    """Free linear evolution ``exp(-n^2 t + i n^3 t) g_n`` of Gaussian data.

    ``g_n`` is a standard complex Gaussian times ``<n>^{-slope}``; the slope
    is drawn uniformly from ``[-1, 1]`` unless given.
    """
    n = np.arange(1, n_modes + 1, dtype=np.float64)
    if slope is None:
        slope = rng.uniform(-1.0, 1.0)
    g = (rng.standard_normal(n_modes) + 1j * rng.standard_normal(n_modes)) * bracket(n) ** (-slope)
    t = dt * np.arange(n_times)[:, None]
    return SpaceTimeField(dt, g * np.exp(-(n**2) * t + 1j * n**3 * t))


def bilinear_sweep(
    n_modes: int,
    s: float,
    eps: float,
    gamma: float,
    T: float,
    n_samples: int,
    seed: int,
    dt: float | None = None,
) -> dict:
    """Maximum bilinear ratio over independent random pairs ``(u, v)``."""
    if dt is None:
        dt = min(product_resolving_step(n_modes), T / 32)
    n_times = int(np.floor(T / dt + 1e-9)) + 1
    rng = np.random.default_rng(np.random.SeedSequence([seed, n_modes]))
    b = 0.5 - eps
    ratios = np.empty(n_samples)
    for i in range(n_samples):
        u = random_field(n_modes, dt, n_times, rng)
        v = random_field(n_modes, dt, n_times, rng)
        ratios[i] = bilinear_ratio(u, v, s, b, gamma, dt * (n_times - 1))
    k = int(np.argmax(ratios))
    return {
        "n_modes": n_modes,
        "s": s,
        "eps": eps,
        "gamma": gamma,
        "T": T,
        "dt": dt,
        "samples": n_samples,
        "max": float(ratios[k]),
        "witness": k,
        "median": float(np.median(ratios)),
        "ratios": ratios,
    }


# --------------------------------------------------------------------------- lemma checkers


def kernel_ratio(n1, n2, s: float, eps: float):
    """``|n| <n>^s / (<n1>^s <n2>^s <n n1 n2>^{1/2-eps} |N1|^{4 eps})`` with ``n = n1 + n2``."""
    n1 = np.asarray(n1, dtype=np.float64)
    n2 = np.asarray(n2, dtype=np.float64)
    n = n1 + n2
    top = np.maximum(np.maximum(np.abs(n), np.abs(n1)), np.abs(n2))
    return (
        np.abs(n)
        * bracket(n) ** s
        / (bracket(n1) ** s * bracket(n2) ** s * bracket(n * n1 * n2) ** (0.5 - eps) * top ** (4 * eps))
    )


def kernel_bound_check(n_max: int, s: float, eps: float) -> dict:
    """Maximum of :func:`kernel_ratio` over ``0 < |n|, |n1|, |n2| <= n_max``."""
    k = np.arange(-n_max, n_max + 1)
    k = k[k != 0]
    n1, n2 = np.meshgrid(k, k, indexing="ij")
    n = n1 + n2
    valid = (n != 0) & (np.abs(n) <= n_max)
    r = np.where(valid, kernel_ratio(n1, n2, s, eps), -np.inf)
    i, j = np.unravel_index(np.argmax(r), r.shape)
    return {
        "n_max": n_max,
        "s": s,
        "eps": eps,
        "max": float(r[i, j]),
        "witness": (int(n1[i, j] + n2[i, j]), int(n1[i, j]), int(n2[i, j])),
        "hypothesis_ok": bool(s >= -0.5 - eps),
    }


def sup_sum_value(n: int, mu: float, delta: float, n_max: int) -> float:
    n1 = np.arange(-n_max, n_max + 1)
    n1 = n1[(n1 != 0) & (n1 != n)]
    return float(np.sum((1.0 + np.abs(mu - n1 * (n - n1))) ** (-delta)))


def sup_sum_check(delta: float, n_max: int, mu_grid=None, n_values=None) -> dict:
    """``max_{n, mu} sum_{n1 != 0, n} (1 + |mu - n1 (n - n1)|)^{-delta}`` over ``|n1| <= n_max``.

    The default grids are ``n = 1..64`` and every integer ``mu`` in
    ``[-512, 1536]``; sums are evaluated exactly over the truncated range.
    """
    if n_values is None:
        n_values = np.arange(1, 65)
    if mu_grid is None:
        mu_grid = np.arange(-512, 1537)
    mu_grid = np.asarray(mu_grid, dtype=np.float64)
    n1 = np.arange(-n_max, n_max + 1, dtype=np.float64)
    best, witness = -np.inf, None
    for n in np.asarray(n_values):
        m1 = n1[(n1 != 0) & (n1 != n)]
        prods = m1 * (n - m1)
        # block over mu to bound memory
        for lo in range(0, mu_grid.size, 256):
            mus = mu_grid[lo : lo + 256]
            sums = np.sum((1.0 + np.abs(mus[:, None] - prods[None, :])) ** (-delta), axis=1)
            k = int(np.argmax(sums))
            if sums[k] > best:
                best, witness = float(sums[k]), (int(n), float(mus[k]))
    return {"delta": delta, "n_max": n_max, "max": best, "witness": witness, "hypothesis_ok": bool(delta > 0.5)}


def convolution_integral(delta1: float, delta2: float, a: float) -> float:
    """``int dtheta / (<theta>^delta1 <a - theta>^delta2)`` by adaptive quadrature."""
    if not (0 < delta1 <= delta2 and delta1 + delta2 > 1):
        raise ValueError("need 0 < delta1 <= delta2 and delta1 + delta2 > 1")
    f = lambda th: bracket(th) ** (-delta1) * bracket(a - th) ** (-delta2)
    lo, hi = min(0.0, a), max(0.0, a)
    opts = dict(limit=400, epsabs=1e-13, epsrel=1e-12)
    parts = [sint.quad(f, -np.inf, lo, **opts)[0], sint.quad(f, hi, np.inf, **opts)[0]]
    if hi > lo:
        edges = np.unique(np.concatenate([np.linspace(lo, hi, 9), [lo + 1, hi - 1]]))
        edges = edges[(edges >= lo) & (edges <= hi)]
        parts += [sint.quad(f, x0, x1, **opts)[0] for x0, x1 in zip(edges[:-1], edges[1:])]
    return float(np.sum(parts))


def integral_decay_exponent(delta1: float, delta2: float, offset: float = 1e-2) -> float:
    """``alpha = delta1 - (1 - delta2)_+`` where ``(0)_+`` means a small positive offset."""
    gap = 1.0 - delta2
    plus = gap if gap > 0 else (offset if gap == 0 else 0.0)
    return delta1 - plus


def convolution_integral_check(delta1: float, delta2: float, a: float) -> dict:
    value = convolution_integral(delta1, delta2, a)
    alpha = integral_decay_exponent(delta1, delta2)
    bound = float(bracket(a) ** (-alpha))
    return {"delta1": delta1, "delta2": delta2, "a": a, "integral": value, "bound": bound,
            "alpha": alpha, "ratio": value / bound}


def gain_power_check(
    b: float,
    s: float = -0.55,
    n_modes: int = 2,
    k_values=range(2, 8),
    samples_per_T: int = 256,
    seed: int = 0,
) -> dict:
    """Log-log slope of ``||chi_[0,T] u||_{X^{s,b}} / ||u||_{X^{s,1/2}}`` against ``T = 2^-k``.

    ``u = psi(t) exp(-n^2 |t| + i n^3 t) g_n`` with a Gaussian bump ``psi``;
    the denominator is the unrestricted norm of this fixed extension, since
    a sharp cutoff has infinite norm at ``b = 1/2``.
    """
    rng = np.random.default_rng(seed)
    n = np.arange(1, n_modes + 1, dtype=np.float64)
    g = rng.standard_normal(n_modes) + 1j * rng.standard_normal(n_modes)

    def sample(t):
        psi = np.exp(-0.5 * t**2)
        return psi[:, None] * g * np.exp(-(n**2) * np.abs(t)[:, None] + 1j * n**3 * t[:, None])

    # unrestricted norm of the extension, sampled on [-8, 8]
    ext_dt = 1.0 / 512
    t_ext = np.arange(-8.0, 8.0 + ext_dt / 2, ext_dt)
    ext = SpaceTimeField(ext_dt, sample(t_ext) * np.exp(1j * n**3 * t_ext[0]))
    denominator = xsb_norm(ext, s, 0.5, n_fft=fft_length(ext.n_times, 1, 4))
    Ts, ratios = [], []
    for k in k_values:
        T = 2.0 ** (-k)
        dt = T / samples_per_T
        t = dt * np.arange(samples_per_T + 1)
        f = SpaceTimeField(dt, sample(t))
        Ts.append(T)
        ratios.append(xsb_norm(f, s, b, T) / denominator)
    slope, _ = np.polyfit(np.log(Ts), np.log(ratios), 1)
    return {"b": b, "s": s, "T": Ts, "ratio": ratios, "slope": float(slope), "target": 0.5 - b}
