"""Time stepping for the truncated stochastic KdV-Burgers system.

Schemes
-------
``exponential-euler``
    ``u+ = S(dt)[u + dt N(u)] + xi``: the linear flow and the stochastic
    convolution are exact in law, the nonlinearity is first order.
``strang-split``
    half step of truncated KdV, exact Ornstein-Uhlenbeck step, half step of
    KdV. With the default midpoint KdV solver each block preserves
    truncated white noise.
``euler-maruyama``
    plain explicit Euler-Maruyama; only stable for tiny steps, kept as an
    independent reference.

All step functions work on coefficient arrays of shape ``(..., N)`` so an
ensemble of paths is advanced in one call.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .noise import NoiseStream, phi_symbol
from .spectral import (
    DEFAULT_COEFFICIENT,
    SpectralField,
    TorusGrid,
    dispersion_symbol,
    h1_sq,
    l2_sq,
    linear_symbol,
    nonlinear_term,
    semigroup_symbol,
)

SCHEMES = ("exponential-euler", "euler-maruyama", "strang-split")
KDV_METHODS = ("midpoint", "lawson-rk4")
OBSERVABLES = ("l2_sq", "h1_sq", "h1_integral", "martingale", "quadratic_variation")
SNAPSHOT_MAGIC = b"SKDVSNAP"


class StepFailure(RuntimeError):
    """A path left the finite/bounded regime during a step."""

    def __init__(self, time: float, mode: int, path: int | None = None, reason: str = "non-finite"):
        self.time, self.mode, self.path, self.reason = time, mode, path, reason
        where = f" on path {path}" if path is not None else ""
        super().__init__(f"step failure ({reason}) at t={time:.6g}, mode n={mode}{where}")


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float
    T: float
    scheme: str = "exponential-euler"
    coefficient: float = DEFAULT_COEFFICIENT
    nonlinear: bool = True
    record: tuple[str, ...] = ("l2_sq", "h1_sq")
    stride: int = 1
    store_states: bool = True
    ceiling: float = 1e6
    kdv_method: str = "midpoint"
    tolerance: float = 1e-12
    max_iterations: int = 100
    noise_base_dt: float | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.T < 0:
            raise ValueError(f"horizon must be non-negative, got {self.T}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.kdv_method not in KDV_METHODS:
            raise ValueError(f"unknown KdV method {self.kdv_method!r}; choose from {KDV_METHODS}")
        unknown = set(self.record) - set(OBSERVABLES)
        if unknown:
            raise ValueError(f"unknown observables {sorted(unknown)}; choose from {OBSERVABLES}")
        if self.stride < 1:
            raise ValueError("recording stride must be at least 1")
        steps = self.T / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError(f"horizon {self.T} is not a whole number of steps of {self.dt}")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


# --------------------------------------------------------------------------- elementary blocks


def _nl(c, n_points, coefficient, nonlinear):
    if not nonlinear:
        return np.zeros_like(c)
    return nonlinear_term(c, n_points, coefficient)


def kdv_midpoint(c, dt, n_points, coefficient=DEFAULT_COEFFICIENT, tolerance=1e-12, max_iterations=100):
    """Implicit midpoint rule for truncated KdV in the interaction picture.

    Conserves the L2 norm up to the fixed-point tolerance and preserves
    phase-space volume, hence the truncated white-noise law.
    """
    n_modes = c.shape[-1]
    full = dispersion_symbol(n_modes, dt)
    half = dispersion_symbol(n_modes, 0.5 * dt)
    rotated = half * c
    base = full * c
    new = base + dt * half * nonlinear_term(rotated, n_points, coefficient)
    scale = 1.0 + np.max(np.abs(c), initial=0.0)
    for _ in range(max_iterations):
        mid = 0.5 * (rotated + np.conj(half) * new)
        nxt = base + dt * half * nonlinear_term(mid, n_points, coefficient)
        change = np.max(np.abs(nxt - new), initial=0.0)
        new = nxt
        if change <= tolerance * scale or not np.isfinite(change):
            return new
    raise StepFailure(float("nan"), int(np.argmax(np.max(np.abs(new), axis=tuple(range(new.ndim - 1))))) + 1,
                      reason="midpoint iteration did not converge")


def kdv_lawson_rk4(c, dt, n_points, coefficient=DEFAULT_COEFFICIENT):
    """Integrating-factor Runge-Kutta 4 for truncated KdV."""
    n_modes = c.shape[-1]
    full = dispersion_symbol(n_modes, dt)
    half = dispersion_symbol(n_modes, 0.5 * dt)
    k1 = nonlinear_term(c, n_points, coefficient)
    k2 = nonlinear_term(half * (c + 0.5 * dt * k1), n_points, coefficient)
    k3 = nonlinear_term(half * c + 0.5 * dt * k2, n_points, coefficient)
    k4 = nonlinear_term(full * c + dt * half * k3, n_points, coefficient)
    return full * c + dt / 6.0 * (full * k1 + 2.0 * half * (k2 + k3) + k4)


def _kdv(c, dt, n_points, cfg: IntegratorConfig):
    if not cfg.nonlinear:
        return dispersion_symbol(c.shape[-1], dt) * c
    if cfg.kdv_method == "lawson-rk4":
        return kdv_lawson_rk4(c, dt, n_points, cfg.coefficient)
    return kdv_midpoint(c, dt, n_points, cfg.coefficient, cfg.tolerance, cfg.max_iterations)


def _exp_euler(c, dt, n_points, cfg, noise_term):
    prop = semigroup_symbol(c.shape[-1], dt)
    return prop * (c + dt * _nl(c, n_points, cfg.coefficient, cfg.nonlinear)) + noise_term


def _euler_maruyama(c, dt, n_points, cfg, db_term):
    drift = linear_symbol(c.shape[-1]) * c + _nl(c, n_points, cfg.coefficient, cfg.nonlinear)
    return c + dt * drift + db_term


def _ou(c, dt, noise_term):
    n = np.arange(1, c.shape[-1] + 1, dtype=np.float64)
    return np.exp(-(n**2) * dt) * c + noise_term


# --------------------------------------------------------------------------- public single steps


def _as_field(u: SpectralField, coeffs) -> SpectralField:
    return SpectralField(u.grid, coeffs)


def _batch_size(c) -> int:
    return int(np.prod(c.shape[:-1])) if c.ndim > 1 else 1


def _noise(stream: NoiseStream | None, sym, step, dt, c, path_offset):
    if stream is None or not np.any(sym):
        return np.zeros_like(c), np.zeros_like(c)
    xi, db = stream.increments(step, dt, _batch_size(c), c.shape[-1], path_offset)
    return xi.reshape(c.shape), db.reshape(c.shape)


def _require_dealiased(grid: TorusGrid):
    if not grid.dealiased:
        raise ValueError(f"grid with n_points={grid.n_points} cannot evaluate the nonlinearity without aliasing")


def step_exponential(
    u: SpectralField,
    phi,
    dt: float,
    noise: NoiseStream | None = None,
    step: int = 0,
    coefficient: float = DEFAULT_COEFFICIENT,
    nonlinear: bool = True,
    path_offset: int = 0,
) -> SpectralField:
    _require_dealiased(u.grid)
    cfg = IntegratorConfig(dt=dt, T=dt, coefficient=coefficient, nonlinear=nonlinear)
    sym = phi_symbol(phi, u.grid.n_modes)
    xi, _ = _noise(noise, sym, step, dt, u.coeffs, path_offset)
    out = _exp_euler(u.coeffs, dt, u.grid.n_points, cfg, sym * xi)
    _check_finite(out, dt, cfg.ceiling)
    return _as_field(u, out)


def step_ou_exact(
    u: SpectralField, phi, dt: float, noise: NoiseStream | None = None, step: int = 0, path_offset: int = 0
) -> SpectralField:
    """Exact Ornstein-Uhlenbeck update: dissipation ``exp(-n^2 dt)`` plus its exact noise."""
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    if noise is not None and noise.dispersive:
        raise ValueError("the Ornstein-Uhlenbeck block needs a non-dispersive noise stream")
    sym = phi_symbol(phi, u.grid.n_modes)
    xi, _ = _noise(noise, sym, step, dt, u.coeffs, path_offset)
    return _as_field(u, _ou(u.coeffs, dt, sym * xi))


def step_kdv(
    u: SpectralField,
    dt: float,
    coefficient: float = DEFAULT_COEFFICIENT,
    nonlinear: bool = True,
    method: str = "midpoint",
) -> SpectralField:
    _require_dealiased(u.grid)
    cfg = IntegratorConfig(dt=dt, T=dt, coefficient=coefficient, nonlinear=nonlinear, kdv_method=method)
    out = _kdv(u.coeffs, dt, u.grid.n_points, cfg)
    _check_finite(out, dt, cfg.ceiling)
    return _as_field(u, out)


def _check_finite(c, t, ceiling):
    norms = np.sqrt(l2_sq(c))
    bad = ~np.isfinite(norms) | (norms > ceiling)
    if np.any(bad):
        flat = np.reshape(c, (-1, c.shape[-1]))
        path = int(np.flatnonzero(np.reshape(bad, -1))[0])
        row = np.abs(flat[path])
        mode = int(np.argmax(np.where(np.isfinite(row), row, np.inf))) + 1
        raise StepFailure(t, mode, path if c.ndim > 1 else None,
                          "non-finite" if not np.isfinite(norms).all() else "ceiling exceeded")


# --------------------------------------------------------------------------- trajectories


@dataclass
class Trajectory:
    """Recorded output of :func:`integrate`.

    ``states`` has shape ``(n_records, *batch, N)``; every observable has
    shape ``(n_records, *batch)``. ``blown`` marks paths that exceeded the
    ceiling; their entries after the failure are NaN.
    """

    grid: TorusGrid
    times: np.ndarray
    states: np.ndarray | None
    observables: dict[str, np.ndarray]
    stride: int
    blown: np.ndarray = field(default_factory=lambda: np.zeros((), dtype=bool))
    failures: list[StepFailure] = field(default_factory=list)

    @property
    def final(self) -> SpectralField:
        if self.states is None:
            raise ValueError("trajectory was recorded without states")
        return SpectralField(self.grid, self.states[-1])

    def to_csv(self, path: str | Path) -> None:
        from .harness import write_csv

        names = sorted(self.observables)
        rows = []
        batch = self.observables[names[0]].shape[1:] if names else ()
        n_paths = int(np.prod(batch)) if batch else 1
        for p in range(n_paths):
            for j, t in enumerate(self.times):
                vals = [float(np.reshape(self.observables[k][j], -1)[p]) for k in names]
                rows.append(([p] if batch else []) + [float(t)] + vals)
        header = (["path"] if batch else []) + ["time"] + names
        write_csv(path, header, rows)

    def write_snapshots(self, path: str | Path) -> None:
        """Binary dump: magic, then little-endian ``N, M, stride, records, paths`` and float64 data."""
        if self.states is None:
            raise ValueError("trajectory was recorded without states")
        states = np.asarray(self.states)
        n_rec = states.shape[0]
        n_paths = int(np.prod(states.shape[1:-1])) if states.ndim > 2 else 1
        with open(path, "wb") as fh:
            fh.write(SNAPSHOT_MAGIC)
            fh.write(struct.pack("<5q", self.grid.n_modes, self.grid.n_points, self.stride, n_rec, n_paths))
            fh.write(np.asarray(self.times, dtype="<f8").tobytes())
            flat = states.reshape(n_rec, n_paths, self.grid.n_modes)
            fh.write(np.ascontiguousarray(flat).view(np.float64).astype("<f8").tobytes())


def read_snapshots(path: str | Path) -> tuple[TorusGrid, int, np.ndarray, np.ndarray]:
    """Inverse of :meth:`Trajectory.write_snapshots`: ``(grid, stride, times, states)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != SNAPSHOT_MAGIC:
        raise ValueError("not a snapshot file")
    n_modes, n_points, stride, n_rec, n_paths = struct.unpack("<5q", raw[8:48])
    off = 48
    times = np.frombuffer(raw, dtype="<f8", count=n_rec, offset=off)
    off += 8 * n_rec
    data = np.frombuffer(raw, dtype="<f8", count=2 * n_rec * n_paths * n_modes, offset=off)
    states = data.view(np.complex128).reshape(n_rec, n_paths, n_modes)
    return TorusGrid(n_modes, n_points), stride, times.copy(), states.copy()


def integrate(
    u0: SpectralField,
    phi,
    cfg: IntegratorConfig,
    seed: int = 0,
    path_offset: int = 0,
    raise_on_failure: bool | None = None,
) -> Trajectory:
    """Evolve ``u0`` (a single field or a batch of fields) to ``cfg.T``.

    A single path raises :class:`StepFailure` on blowup; in a batch the
    offending paths are flagged in ``Trajectory.blown`` and frozen.
    """
    grid = u0.grid
    if cfg.nonlinear:
        _require_dealiased(grid)
    c = np.array(u0.coeffs, dtype=np.complex128)
    batched = c.ndim > 1
    if raise_on_failure is None:
        raise_on_failure = not batched
    sym = phi_symbol(phi, grid.n_modes)
    noisy = bool(np.any(sym))
    base = cfg.noise_base_dt or cfg.dt
    dispersive = cfg.scheme != "strang-split"
    stream = NoiseStream(seed, base, "noise", dispersive) if noisy else None
    n = np.arange(1, grid.n_modes + 1)
    m_weight = 4.0 * sym * n  # d||u||^2 martingale: 4 Re(conj c * phi * i n dB)

    alive = np.ones(c.shape[:-1], dtype=bool)
    h1_prev = h1_sq(c)
    qv_weight = 16.0 * sym**2 * n**2  # d<M> = 16 sum_n phi_n^2 n^2 |c_n|^2 dt
    acc = {name: np.zeros(c.shape[:-1]) for name in ("h1_integral", "martingale", "quadratic_variation")}

    def observe(cc):
        out = {}
        for name in cfg.record:
            if name == "l2_sq":
                out[name] = l2_sq(cc)
            elif name == "h1_sq":
                out[name] = h1_sq(cc)
            else:
                out[name] = acc[name].copy()
        return out

    times, states = [0.0], [c.copy()] if cfg.store_states else None
    obs = {k: [v] for k, v in observe(c).items()}
    failures: list[StepFailure] = []
    dt, npts = cfg.dt, grid.n_points

    for k in range(cfg.n_steps):
        t_next = (k + 1) * dt
        xi, db = _noise(stream, sym, k, dt, c, path_offset)
        if "martingale" in cfg.record and noisy:
            acc["martingale"] += np.sum(m_weight * np.real(np.conj(c) * 1j * db), axis=-1)
        if "quadratic_variation" in cfg.record:
            acc["quadratic_variation"] += dt * np.sum(qv_weight * np.abs(c) ** 2, axis=-1)
        with np.errstate(over="ignore", invalid="ignore"):
            if cfg.scheme == "exponential-euler":
                c = _exp_euler(c, dt, npts, cfg, sym * xi)
            elif cfg.scheme == "euler-maruyama":
                c = _euler_maruyama(c, dt, npts, cfg, sym * 1j * n * db)
            else:
                c = _kdv(c, 0.5 * dt, npts, cfg)
                c = _ou(c, dt, sym * xi)
                c = _kdv(c, 0.5 * dt, npts, cfg)
        norms = np.sqrt(l2_sq(c))
        bad = alive & (~np.isfinite(norms) | (norms > cfg.ceiling))
        if np.any(bad):
            flat_bad = np.flatnonzero(np.reshape(bad, -1))
            for p in flat_bad:
                row = np.abs(np.reshape(c, (-1, grid.n_modes))[p])
                mode = int(np.argmax(np.where(np.isfinite(row), row, np.inf))) + 1
                failures.append(StepFailure(t_next, mode, int(p) + path_offset if batched else None,
                                            "non-finite" if not np.isfinite(norms.flat[p]) else "ceiling exceeded"))
            if raise_on_failure:
                raise failures[0]
            alive &= ~bad
        if batched:
            c[~alive] = 0.0
        h1_now = h1_sq(c)
        acc["h1_integral"] += 0.5 * dt * (h1_prev + h1_now)
        h1_prev = h1_now
        if (k + 1) % cfg.stride == 0 or k + 1 == cfg.n_steps:
            times.append(t_next)
            if states is not None:
                states.append(c.copy())
            for name, v in observe(c).items():
                obs[name].append(v)

    def finish(arr):
        arr = np.asarray(arr)
        if batched and np.any(~alive):
            mask = np.broadcast_to(~alive, arr.shape[1 : 1 + alive.ndim])
            arr = arr.astype(np.result_type(arr, np.float64), copy=True)
            arr[1:, mask] = np.nan
        return arr

    return Trajectory(
        grid=grid,
        times=np.asarray(times),
        states=finish(states) if states is not None else None,
        observables={k: finish(v) for k, v in obs.items()},
        stride=cfg.stride,
        blown=~alive,
        failures=failures,
    )


def observable_times(cfg: IntegratorConfig) -> np.ndarray:
    steps = np.arange(cfg.stride, cfg.n_steps + 1, cfg.stride)
    if cfg.n_steps and (not steps.size or steps[-1] != cfg.n_steps):
        steps = np.append(steps, cfg.n_steps)
    return np.concatenate([[0.0], steps * cfg.dt])


def energy_residual(traj: Trajectory, phi, t0_index: int, t1_index: int) -> np.ndarray:
    """Per-path ``(||u(t1)||^2 - ||u(t0)||^2)/(t1 - t0) - [ -2 avg ||u||_{H1}^2 + 2 ||phi||_{H1}^2 ]``.

    Its ensemble mean vanishes by the Ito energy identity; requires the
    ``l2_sq`` and ``h1_integral`` observables.
    """
    sym = phi_symbol(phi, traj.grid.n_modes)
    n = np.arange(1, traj.grid.n_modes + 1)
    phi_h1 = 2.0 * np.sum(n**2 * sym**2)
    t0, t1 = traj.times[t0_index], traj.times[t1_index]
    l2 = traj.observables["l2_sq"]
    hi = traj.observables["h1_integral"]
    observed = (l2[t1_index] - l2[t0_index]) / (t1 - t0)
    predicted = -2.0 * (hi[t1_index] - hi[t0_index]) / (t1 - t0) + 2.0 * phi_h1
    return observed - predicted


__all__ = [
    "IntegratorConfig",
    "StepFailure",
    "Trajectory",
    "energy_residual",
    "integrate",
    "kdv_lawson_rk4",
    "kdv_midpoint",
    "observable_times",
    "read_snapshots",
    "step_exponential",
    "step_kdv",
    "step_ou_exact",
]
