"""Monte Carlo tests of white-noise invariance for the truncated flows.

Truncated white noise ``mu_N`` makes ``a_n, b_n`` i.i.d. ``N(0, 1/2)``.
The tests here evolve ensembles drawn from ``mu_N`` and compare low-order
moments and the law of ``2|c_n|^2`` (chi-squared, two degrees of freedom)
against their stationary values, with a Bonferroni family-wise gate.
"""

from __future__ import annotations

import itertools
from collections.abc import Sequence
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import stats

from .dynamics import IntegratorConfig, StepFailure, integrate, kdv_midpoint
from .noise import NoiseStream, phi_symbol, sample_white_noise
from .spectral import (
    DEFAULT_COEFFICIENT,
    SpectralField,
    TorusGrid,
    default_points,
    l2_sq,
    nonlinear_term,
)

FLOWS = ("ou", "kdv", "full", "split")
PARTS = ("L1", "L2", "full")
DEFAULT_LEVELS = (1e-3, 5e-4, 2.5e-4)
BLOWUP_LIMIT = 1e-3

# --------------------------------------------------------------------------- exact accumulators

_SHIFT = 1126  # every finite double is an integer multiple of 2^-1126 after frexp scaling
_ROWS = 1 << 24


def _exact_column_sums(x: np.ndarray) -> list[int]:
    """Column sums of a finite float array as exact integers in units of ``2^-_SHIFT``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a (samples, columns) array")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite samples cannot be accumulated")
    n_rows, n_cols = x.shape
    totals = [0] * n_cols
    for lo in range(0, n_rows, _ROWS):
        block = x[lo : lo + _ROWS]
        m, e = np.frexp(block)
        M = np.rint(np.ldexp(m, 53)).astype(np.int64)
        hi = M >> 26
        low = M - (hi << 26)
        e_min = int(e.min()) if e.size else 0
        span = int(e.max()) - e_min + 1 if e.size else 1
        index = (np.arange(n_cols)[None, :] * span + (e - e_min)).ravel()
        # every partial sum is an integer below 2^53, so float bincount is exact
        s_hi = np.bincount(index, weights=hi.ravel().astype(np.float64), minlength=n_cols * span)
        s_lo = np.bincount(index, weights=low.ravel().astype(np.float64), minlength=n_cols * span)
        s_hi = s_hi.reshape(n_cols, span)
        s_lo = s_lo.reshape(n_cols, span)
        for j in range(n_cols):
            nz = np.nonzero((s_hi[j] != 0) | (s_lo[j] != 0))[0]
            acc = 0
            for k in nz:
                shift = int(k) + e_min - 53 + _SHIFT
                acc += ((int(s_hi[j, k]) << 26) + int(s_lo[j, k])) << shift
            totals[j] += acc
    return totals


class EnsembleStats:
    """Streaming count, sum and sum of squares per named statistic.

    Sums are kept as exact integers, so merging partial accumulators in any
    order reproduces the accumulator of the union bit for bit.
    """

    def __init__(self, names: Sequence[str]):
        self.names = tuple(names)
        self.count = 0
        self._sum = [0] * len(self.names)
        self._sumsq = [0] * len(self.names)

    def add(self, samples: np.ndarray) -> EnsembleStats:
        x = np.asarray(samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[1] != len(self.names):
            raise ValueError(f"expected {len(self.names)} columns, got {x.shape[1]}")
        s1 = _exact_column_sums(x)
        s2 = _exact_column_sums(x * x)
        self._sum = [a + b for a, b in zip(self._sum, s1)]
        self._sumsq = [a + b for a, b in zip(self._sumsq, s2)]
        self.count += x.shape[0]
        return self

    def merge(self, other: EnsembleStats) -> EnsembleStats:
        if other.names != self.names:
            raise ValueError("cannot merge accumulators of different statistics")
        out = EnsembleStats(self.names)
        out.count = self.count + other.count
        out._sum = [a + b for a, b in zip(self._sum, other._sum)]
        out._sumsq = [a + b for a, b in zip(self._sumsq, other._sumsq)]
        return out

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EnsembleStats)
            and self.names == other.names
            and self.count == other.count
            and self._sum == other._sum
            and self._sumsq == other._sumsq
        )

    @property
    def mean(self) -> np.ndarray:
        if not self.count:
            return np.full(len(self.names), np.nan)
        scale = self.count << _SHIFT
        return np.array([float(Fraction(s, scale)) for s in self._sum])

    @property
    def variance(self) -> np.ndarray:
        n = self.count
        if n < 2:
            return np.full(len(self.names), np.nan)
        unit = 1 << _SHIFT
        out = []
        for s, q in zip(self._sum, self._sumsq):
            num = Fraction(q, unit) - Fraction(s * s, unit * unit * n)
            out.append(float(num / (n - 1)))
        return np.array(out)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.variance, 0.0) / max(self.count, 1))

    def table(self) -> dict[str, dict]:
        return {k: {"mean": float(m), "se": float(s)} for k, m, s in zip(self.names, self.mean, self.se)}


def default_cross_pairs(n_modes: int) -> list[tuple[int, int]]:
    top = min(n_modes, 4)
    return list(itertools.combinations(range(1, top + 1), 2))


def moment_columns(coeffs: np.ndarray, cross_pairs=()) -> tuple[list[str], np.ndarray]:
    """Per-path samples of ``a_n, b_n, a_n^2, b_n^2, a_n b_n`` and chosen cross products."""
    a, b = coeffs.real, coeffs.imag
    n_modes = coeffs.shape[-1]
    names, cols = [], []
    for n in range(1, n_modes + 1):
        an, bn = a[:, n - 1], b[:, n - 1]
        names += [f"a{n}", f"b{n}", f"a{n}^2", f"b{n}^2", f"a{n}b{n}"]
        cols += [an, bn, an * an, bn * bn, an * bn]
    for i, j in cross_pairs:
        ai, bi, aj, bj = a[:, i - 1], b[:, i - 1], a[:, j - 1], b[:, j - 1]
        names += [f"a{i}a{j}", f"b{i}b{j}", f"a{i}b{j}", f"b{i}a{j}"]
        cols += [ai * aj, bi * bj, ai * bj, bi * aj]
    return names, np.stack(cols, axis=1)


def moment_targets(names: Sequence[str], variance: np.ndarray) -> np.ndarray:
    out = np.zeros(len(names))
    for k, name in enumerate(names):
        if name.endswith("^2"):
            out[k] = variance[int(name[1:-2]) - 1]
    return out


# --------------------------------------------------------------------------- flows


def _evolve_ou(c, T, sym, seed, offset):
    if T == 0:
        return c.copy()
    n = np.arange(1, c.shape[-1] + 1, dtype=np.float64)
    xi, _ = NoiseStream(seed, T, "noise", dispersive=False).increments(0, T, c.shape[0], c.shape[-1], offset)
    return np.exp(-(n**2) * T) * c + sym * xi


def _evolve_kdv(c, T, dt, coefficient, n_points):
    steps = int(round(T / dt))
    if abs(steps * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"horizon {T} is not a whole number of steps of {dt}")
    for _ in range(steps):
        c = kdv_midpoint(c, dt, n_points, coefficient)
    return c


def _evolve_integrator(u0: SpectralField, sym, T, dt, scheme, seed, offset, coefficient, base_dt=None):
    cfg = IntegratorConfig(dt=dt, T=T, scheme=scheme, coefficient=coefficient, record=(),
                           stride=max(1, int(round(T / dt))), noise_base_dt=base_dt)
    traj = integrate(u0, sym, cfg, seed=seed, path_offset=offset)
    return traj.states[-1], traj.blown


@dataclass
class InvarianceReport:
    flow: str
    n_modes: int
    T: float
    dt: tuple[float, ...]
    paths: int
    seed: int
    claim_regime: bool
    names: list[str]
    mean: np.ndarray
    se: np.ndarray
    target: np.ndarray
    z: np.ndarray
    pvalues: np.ndarray
    ks_statistic: np.ndarray
    ks_pvalues: np.ndarray
    blown: int
    alpha: float = 1e-3
    level_bias: list[float] = field(default_factory=list)
    level_bias_se: list[float] = field(default_factory=list)
    level_deviation: list[float] = field(default_factory=list)
    max_norm_drift: float = float("nan")

    @property
    def valid(self) -> bool:
        return self.blown <= BLOWUP_LIMIT * self.paths

    @property
    def n_tests(self) -> int:
        return len(self.pvalues) + len(self.ks_pvalues)

    @property
    def family_pvalue(self) -> float:
        allp = np.concatenate([self.pvalues, self.ks_pvalues])
        return float(min(1.0, allp.min() * allp.size)) if allp.size else 1.0

    @property
    def passed(self) -> bool:
        return self.valid and self.family_pvalue >= self.alpha

    @property
    def omnibus_pvalue(self) -> float:
        """Chi-squared p-value of ``sum z^2``; the moment statistics are uncorrelated under the null."""
        return float(stats.chi2.sf(np.sum(self.z**2), self.z.size))

    def variance_z(self) -> np.ndarray:
        idx = [k for k, name in enumerate(self.names) if name.endswith("^2")]
        return self.z[idx]

    @property
    def bias_monotone(self) -> bool:
        b = self.level_bias
        return len(b) >= 2 and all(x > y for x, y in zip(b, b[1:]))

    def to_dict(self) -> dict:
        return {
            "flow": self.flow,
            "n_modes": self.n_modes,
            "T": self.T,
            "dt": list(self.dt),
            "paths": self.paths,
            "seed": self.seed,
            "claim_regime": self.claim_regime,
            "blown": self.blown,
            "valid": self.valid,
            "alpha": self.alpha,
            "family_pvalue": self.family_pvalue,
            "omnibus_pvalue": self.omnibus_pvalue,
            "passed": self.passed,
            "max_abs_z": float(np.max(np.abs(self.z))) if self.z.size else 0.0,
            "statistics": {
                name: {"mean": float(m), "se": float(s), "target": float(t), "z": float(z), "p": float(p)}
                for name, m, s, t, z, p in zip(self.names, self.mean, self.se, self.target, self.z, self.pvalues)
            },
            "ks": [{"mode": n + 1, "statistic": float(d), "p": float(p)}
                   for n, (d, p) in enumerate(zip(self.ks_statistic, self.ks_pvalues))],
            "level_bias": list(self.level_bias),
            "level_bias_se": list(self.level_bias_se),
            "level_deviation": list(self.level_deviation),
            "bias_monotone": self.bias_monotone if self.level_bias else None,
            "max_norm_drift": self.max_norm_drift,
        }


def _z_and_p(mean, se, target):
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, (mean - target) / np.where(se > 0, se, 1.0), np.where(mean == target, 0.0, np.inf))
    return z, 2.0 * stats.norm.sf(np.abs(z))


def invariance_test(
    flow: str,
    n_modes: int,
    phi=None,
    T: float = 1.0,
    dt=None,
    paths: int = 10_000,
    seed: int = 0,
    chunk: int = 2000,
    cross_pairs=None,
    alpha: float = 1e-3,
    coefficient: float = DEFAULT_COEFFICIENT,
) -> InvarianceReport:
    """Evolve ``paths`` white-noise samples under ``flow`` to time ``T`` and test the law at ``T``.

    ``flow`` is one of ``ou`` (exact Ornstein-Uhlenbeck solution), ``kdv``
    (midpoint truncated KdV), ``split`` (Strang splitting) or ``full``
    (exponential Euler at the coupled steps in ``dt``, judged on the
    per-path Richardson extrapolation of the two finest levels). ``phi``
    defaults to the identity; any other choice runs outside the claim and
    is flagged.
    """
    if flow not in FLOWS:
        raise ValueError(f"unknown flow {flow!r}; choose from {FLOWS}")
    if T < 0:
        raise ValueError("horizon must be non-negative")
    grid = TorusGrid(n_modes)
    sym = np.ones(n_modes) if phi is None else phi_symbol(phi, n_modes)
    claim = bool(np.allclose(sym, 1.0)) or flow == "kdv"
    if flow == "full":
        levels = tuple(DEFAULT_LEVELS if dt is None else np.atleast_1d(dt).tolist())
        if len(levels) < 2 or any(x <= y for x, y in zip(levels, levels[1:])):
            raise ValueError("the full flow needs at least two strictly decreasing steps")
    elif flow == "ou":
        levels = (T,)
    else:
        levels = (1e-3 if dt is None else float(dt),)
    pairs = default_cross_pairs(n_modes) if cross_pairs is None else list(cross_pairs)
    names, _ = moment_columns(np.zeros((1, n_modes), dtype=complex), pairs)
    main = EnsembleStats(names)
    per_level = [EnsembleStats(names) for _ in levels] if flow == "full" else []
    gap = [EnsembleStats(names) for _ in levels] if flow == "full" else []
    energies = []
    blown = 0
    drift = 0.0
    for offset in range(0, paths, chunk):
        k = min(chunk, paths - offset)
        u0 = sample_white_noise(grid, seed, n_paths=k, path_offset=offset)
        c0 = u0.coeffs
        if flow == "ou":
            final, dead = _evolve_ou(c0, T, sym, seed, offset), np.zeros(k, bool)
        elif flow == "kdv":
            try:
                final = _evolve_kdv(c0, T, levels[0], coefficient, grid.n_points)
                dead = ~np.isfinite(l2_sq(final))
            except StepFailure:
                final, dead = np.full_like(c0, np.nan), np.ones(k, bool)
            if np.any(~dead):
                drift = max(drift, float(np.max(np.abs(np.sqrt(l2_sq(final[~dead])) - np.sqrt(l2_sq(c0[~dead]))))))
        elif flow == "split":
            final, dead = _evolve_integrator(u0, sym, T, levels[0], "strang-split", seed, offset, coefficient)
        else:
            outs, dead = [], np.zeros(k, bool)
            for h in levels:
                st, bl = _evolve_integrator(u0, sym, T, h, "exponential-euler", seed, offset, coefficient,
                                            base_dt=levels[-1])
                outs.append(st)
                dead |= bl
            keep = ~dead
            cols = [moment_columns(o[keep], pairs)[1] for o in outs]
            extrap = 2.0 * cols[-1] - cols[-2]
            main.add(extrap)
            for acc, col in zip(per_level, cols):
                acc.add(col)
            for acc, col in zip(gap, cols):
                acc.add(col - extrap)
            energies.append(np.abs(outs[-1][keep]) ** 2)
            blown += int(np.count_nonzero(dead))
            continue
        keep = ~dead
        blown += int(np.count_nonzero(dead))
        main.add(moment_columns(final[keep], pairs)[1])
        energies.append(np.abs(final[keep]) ** 2)
    variance = 0.5 * sym**2 if flow != "kdv" else np.full(n_modes, 0.5)
    target = moment_targets(names, variance)
    z, p = _z_and_p(main.mean, main.se, target)
    e = np.concatenate(energies, axis=0) if energies else np.zeros((0, n_modes))
    ks_d, ks_p = np.zeros(n_modes), np.ones(n_modes)
    for n in range(n_modes):
        if e.shape[0]:
            res = stats.kstest(e[:, n] / variance[n], stats.chi2(2).cdf)
            ks_d[n], ks_p[n] = res.statistic, res.pvalue
    report = InvarianceReport(
        flow=flow, n_modes=n_modes, T=T, dt=tuple(float(x) for x in levels), paths=paths, seed=seed,
        claim_regime=claim, names=names, mean=main.mean, se=main.se, target=target, z=z, pvalues=p,
        ks_statistic=ks_d, ks_pvalues=ks_p, blown=blown, alpha=alpha, max_norm_drift=drift,
    )
    if flow == "full":
        var_idx = [k for k, name in enumerate(names) if name.endswith("^2")]
        for acc_level, acc_gap in zip(per_level, gap):
            g = acc_gap.mean[var_idx]
            report.level_bias.append(float(np.sqrt(np.mean(g**2))))
            report.level_bias_se.append(float(np.sqrt(np.mean(acc_gap.se[var_idx] ** 2))))
            d = acc_level.mean[var_idx] - target[var_idx]
            report.level_deviation.append(float(np.sqrt(np.mean(d**2))))
    return report


def pvalue_uniformity(pvalues: Sequence[float]) -> float:
    """KS p-value of a sample of p-values against the uniform law."""
    return float(stats.kstest(np.asarray(pvalues), "uniform").pvalue)


# --------------------------------------------------------------------------- test-function polynomials


class TestFunctionPoly:
    """Polynomial in ``x = (a_1..a_N, b_1..b_N)`` of total degree at most four.

    ``terms`` maps exponent tuples of length ``2N`` to real coefficients.
    """

    __test__ = False  # not a pytest class
    MAX_DEGREE = 4

    def __init__(self, n_modes: int, terms: dict[tuple[int, ...], float], label: str = ""):
        self.n_modes = n_modes
        self.label = label
        clean = {}
        for exps, coef in terms.items():
            exps = tuple(int(e) for e in exps)
            if len(exps) != 2 * n_modes or min(exps, default=0) < 0:
                raise ValueError("exponent vectors must have length 2N with non-negative entries")
            if coef != 0:
                clean[exps] = clean.get(exps, 0.0) + float(coef)
        self.terms = clean
        if self.degree > self.MAX_DEGREE:
            raise ValueError(f"degree {self.degree} exceeds {self.MAX_DEGREE}; moments would not be controlled")

    @property
    def degree(self) -> int:
        return max((sum(e) for e in self.terms), default=0)

    @classmethod
    def parse(cls, n_modes: int, spec: str, label: str | None = None) -> TestFunctionPoly:
        """Build from a sum of products such as ``"a1*a2*b3 + 2*a1^2 - b1^2"``."""
        terms: dict[tuple[int, ...], float] = {}
        text = spec.replace("-", "+-").replace(" ", "")
        for chunk in filter(None, text.split("+")):
            coef, exps = 1.0, [0] * (2 * n_modes)
            for factor in chunk.split("*"):
                if factor.startswith("-"):
                    coef, factor = -coef, factor[1:]
                if not factor:
                    continue
                if factor[0] in "ab":
                    base, _, power = factor.partition("^")
                    n = int(base[1:])
                    if not 1 <= n <= n_modes:
                        raise ValueError(f"mode {n} outside 1..{n_modes}")
                    exps[(n - 1) + (0 if base[0] == "a" else n_modes)] += int(power or 1)
                else:
                    coef *= float(factor)
            key = tuple(exps)
            terms[key] = terms.get(key, 0.0) + coef
        return cls(n_modes, terms, spec if label is None else label)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros(x.shape[:-1])
        for exps, coef in self.terms.items():
            term = np.full(x.shape[:-1], coef)
            for i, e in enumerate(exps):
                if e:
                    term = term * x[..., i] ** e
            out = out + term
        return out

    def derivative(self, i: int) -> TestFunctionPoly:
        terms = {}
        for exps, coef in self.terms.items():
            if exps[i]:
                new = list(exps)
                new[i] -= 1
                terms[tuple(new)] = terms.get(tuple(new), 0.0) + coef * exps[i]
        return TestFunctionPoly(self.n_modes, terms)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return np.stack([self.derivative(i)(x) for i in range(2 * self.n_modes)], axis=-1)

    def hessian_diagonal(self, x: np.ndarray) -> np.ndarray:
        return np.stack([self.derivative(i).derivative(i)(x) for i in range(2 * self.n_modes)], axis=-1)

    def hessian(self, x: np.ndarray) -> np.ndarray:
        d = 2 * self.n_modes
        rows = []
        for i in range(d):
            di = self.derivative(i)
            rows.append(np.stack([di.derivative(j)(x) for j in range(d)], axis=-1))
        return np.stack(rows, axis=-2)

    def __repr__(self) -> str:
        return f"TestFunctionPoly({self.label or self.terms!r})"


BATTERY_SPECS = (
    "a1",
    "b2",
    "a1^2 + b1^2",
    "a1*b1",
    "a2^2 - b2^2",
    "a1*a2",
    "a1*a2*b3",
    "a1*a2*a3",
    "b1^2*b2",
    "a2^2*a4",
    "a1*a3 + b1*b3",
    "a1^2 + b1^2 + a2^2 + b2^2 + a3^2 + b3^2 + a4^2 + b4^2",
    "a1^4",
    "a1^2*b2^2",
    "a1^3*b1",
    "a1^4 + 2*a1^2*b1^2 + b1^4",
    "a1*b3*a4*b4",
    "a1*a2*a3*b4",
    "a1^2*a2*b3",
    "a1^2*a2^2 + b1^2*b2^2",
)


def battery(n_modes: int = 4) -> list[TestFunctionPoly]:
    """The fixed list of twenty test polynomials (needs at least four modes)."""
    if n_modes < 4:
        raise ValueError("the battery uses modes 1..4")
    return [TestFunctionPoly.parse(n_modes, spec) for spec in BATTERY_SPECS]


# --------------------------------------------------------------------------- generator


def to_real(coeffs: np.ndarray) -> np.ndarray:
    return np.concatenate([coeffs.real, coeffs.imag], axis=-1)


def kdv_drift(coeffs: np.ndarray, coefficient: float = DEFAULT_COEFFICIENT) -> np.ndarray:
    """Truncated KdV vector field ``i n^3 c_n + coefficient P_N d/dx(u^2)`` in complex form."""
    n_modes = coeffs.shape[-1]
    n = np.arange(1, n_modes + 1, dtype=np.float64)
    return 1j * n**3 * coeffs + nonlinear_term(coeffs, default_points(n_modes), coefficient)


def generator_values(
    f: TestFunctionPoly, part: str, coeffs: np.ndarray, phi=None, coefficient: float = DEFAULT_COEFFICIENT
) -> np.ndarray:
    """``(L f)(x)`` at every sample; ``part`` selects the KdV, OU or full generator."""
    if part not in PARTS:
        raise ValueError(f"unknown generator part {part!r}; choose from {PARTS}")
    n_modes = coeffs.shape[-1]
    if f.n_modes != n_modes:
        raise ValueError("test function and samples disagree on the number of modes")
    x = to_real(coeffs)
    grad = f.gradient(x)
    out = np.zeros(x.shape[:-1])
    if part in ("L1", "full"):
        F = kdv_drift(coeffs, coefficient)
        out = out + np.sum(to_real(F) * grad, axis=-1)
    if part in ("L2", "full"):
        n2 = np.arange(1, n_modes + 1, dtype=np.float64) ** 2
        sym = np.ones(n_modes) if phi is None else phi_symbol(phi, n_modes)
        n2x = np.concatenate([n2, n2])
        diff = np.concatenate([n2 * sym**2, n2 * sym**2]) / 2.0
        out = out - np.sum(n2x * x * grad, axis=-1) + np.sum(diff * f.hessian_diagonal(x), axis=-1)
    return out


def generator_pairing(
    f: TestFunctionPoly,
    part: str,
    n_modes: int,
    samples: int,
    seed: int = 0,
    phi=None,
    coefficient: float = DEFAULT_COEFFICIENT,
    chunk: int = 100_000,
) -> tuple[float, float]:
    """Monte Carlo estimate of ``E_mu[L f]`` and its standard error."""
    if f.degree > TestFunctionPoly.MAX_DEGREE:
        raise ValueError("test function degree exceeds four")
    grid = TorusGrid(n_modes)
    acc = EnsembleStats(["Lf"])
    for offset in range(0, samples, chunk):
        k = min(chunk, samples - offset)
        c = sample_white_noise(grid, seed, n_paths=k, path_offset=offset, stream="generator").coeffs
        acc.add(generator_values(f, part, c, phi, coefficient))
    return float(acc.mean[0]), float(acc.se[0])


def pairing_passes(estimate: float, se: float, k: float = 4.0) -> bool:
    """``|estimate| < k SE``; an identically vanishing integrand (estimate and SE both 0) passes."""
    if se == 0.0:
        return estimate == 0.0
    return abs(estimate) < k * se


# --------------------------------------------------------------------------- moment audit


@dataclass
class MomentAudit:
    n_modes: int
    T: float
    dt: float
    paths: int
    scheme: str
    initial_l2_sq: float
    phi_h1_sq: float
    times: np.ndarray
    sup_mean: np.ndarray
    moments: dict[int, tuple[float, float]]
    fitted_C: float
    fitted_rate: float
    burkholder_bound: float
    blown: int

    @property
    def bound_holds(self) -> bool:
        lhs = self.moments[1][0]
        return lhs <= 2.0 * self.initial_l2_sq + 2.0 * self.fitted_C * self.phi_h1_sq + 1e-12 * max(lhs, 1.0)

    def jensen_ok(self, k: float = 4.0) -> dict[int, bool]:
        out = {}
        m1, s1 = self.moments[1]
        for p, (mp, sp) in self.moments.items():
            if p == 1:
                continue
            out[p] = mp + k * sp >= max(m1 - k * s1, 0.0) ** p
        return out

    def to_dict(self) -> dict:
        return {
            "n_modes": self.n_modes,
            "T": self.T,
            "dt": self.dt,
            "paths": self.paths,
            "scheme": self.scheme,
            "initial_l2_sq": self.initial_l2_sq,
            "phi_h1_sq": self.phi_h1_sq,
            "moments": {str(p): {"mean": m, "se": s} for p, (m, s) in self.moments.items()},
            "fitted_C": self.fitted_C,
            "fitted_rate": self.fitted_rate,
            "burkholder_bound": self.burkholder_bound,
            "bound_holds": self.bound_holds,
            "jensen": {str(k): v for k, v in self.jensen_ok().items()},
            "blown": self.blown,
        }


DAVIS_CONSTANT = 3.0


def moment_growth_audit(
    phi,
    n_modes: int,
    T: float = 1.0,
    paths: int = 1000,
    u0: SpectralField | None = None,
    powers: Sequence[int] = (1, 2, 3),
    dt: float = 1e-3,
    scheme: str = "strang-split",
    seed: int = 0,
    chunk: int = 1000,
    coefficient: float = DEFAULT_COEFFICIENT,
) -> MomentAudit:
    """Running-supremum moments ``E sup_{t<=T} ||u||^{2p}`` from a fixed initial datum.

    ``fitted_C`` is the smallest constant with
    ``E sup ||u||^2 <= 2 ||u0||^2 + 2 C ||phi||_{H1}^2``; ``fitted_rate`` is
    the least-squares slope of that constant against ``t``. The
    intermediate bound ``||u0||^2 + 2 T ||phi||^2 + 3 E <M>_T^{1/2}`` uses
    the quadratic variation of the energy martingale.
    """
    if any(p not in (1, 2, 3) for p in powers) or 1 not in powers:
        raise ValueError("powers must be drawn from {1, 2, 3} and include 1")
    grid = TorusGrid(n_modes)
    c0 = np.zeros(n_modes, dtype=complex) if u0 is None else np.asarray(u0.coeffs, dtype=complex)
    if c0.shape != (n_modes,):
        raise ValueError("audit starts every path from one deterministic datum")
    sym = phi_symbol(phi, n_modes)
    n = np.arange(1, n_modes + 1, dtype=np.float64)
    phi_h1 = float(2.0 * np.sum(n**2 * sym**2))
    cfg = IntegratorConfig(dt=dt, T=T, scheme=scheme, coefficient=coefficient, record=("l2_sq", "quadratic_variation"),
                           store_states=False)
    names = [f"p{p}" for p in powers]
    acc = EnsembleStats(names)
    qv = EnsembleStats(["sqrt_qv"])
    sup_sum = None
    blown = 0
    for offset in range(0, paths, chunk):
        k = min(chunk, paths - offset)
        start = SpectralField(grid, np.broadcast_to(c0, (k, n_modes)).copy())
        traj = integrate(start, sym, cfg, seed=seed, path_offset=offset)
        keep = ~traj.blown
        blown += int(np.count_nonzero(traj.blown))
        l2 = traj.observables["l2_sq"][:, keep]
        running = np.maximum.accumulate(l2, axis=0)
        sup_sum = running.sum(axis=1) if sup_sum is None else sup_sum + running.sum(axis=1)
        final_sup = running[-1]
        acc.add(np.stack([final_sup**p for p in powers], axis=1))
        qv_path = np.sqrt(traj.observables["quadratic_variation"][-1, keep])
        qv.add(qv_path)
    kept = paths - blown
    sup_mean = sup_sum / max(kept, 1)
    means, ses = acc.mean, acc.se
    moments = {p: (float(m), float(s)) for p, m, s in zip(powers, means, ses)}
    times = traj.times
    l0 = float(l2_sq(c0))
    if phi_h1 > 0:
        C_t = np.maximum(sup_mean - 2.0 * l0, 0.0) / (2.0 * phi_h1)
        fitted_C = float(C_t[-1])
        rate = float(np.sum(times * C_t) / np.sum(times**2)) if np.any(times > 0) else 0.0
    else:
        fitted_C = rate = 0.0
    bound = l0 + 2.0 * T * phi_h1 + DAVIS_CONSTANT * float(qv.mean[0])
    return MomentAudit(n_modes, T, dt, paths, scheme, l0, phi_h1, times, sup_mean, moments, fitted_C, rate,
                       bound, blown)
