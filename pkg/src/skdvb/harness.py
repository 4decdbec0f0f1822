"""Experiment configuration, reproducible runs, artifacts and reports.

A run is described by an :class:`ExperimentConfig`, executed by :func:`run`
into ``<out>/<kind>-<hash12>/`` and summarised by :func:`report`. Result
payloads depend only on the resolved configuration: thread count and output
location are excluded from the hash, and work is split into fixed chunks
whose results are gathered in index order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from importlib import metadata
from pathlib import Path
from typing import Any, Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import invariance as inv
from . import mild, xsb
from .dynamics import IntegratorConfig, Trajectory, energy_residual, integrate
from .noise import (
    convolution_norm_growth,
    convolution_variance_check,
    phi_operator,
    sample_white_noise,
)
from .spectral import SpectralField, TorusGrid, default_points

KINDS = ("simulate", "invariance", "bilinear", "mild", "lemma-check", "moment-audit")
OUT_ENV = "SKDVB_OUT"
DEFAULT_OUT = "runs"
CHUNK = 250


class ConfigError(ValueError):
    """Schema violation; ``errors`` lists ``(path, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{loc}: {msg}" for loc, msg in errors))


class RunError(RuntimeError):
    pass


# --------------------------------------------------------------------------- schema


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PhiSpec(_Section):
    """Diagonal noise multiplier: ``phi_n = n^-power`` or an explicit table."""

    power: float | None = Field(None, ge=0)
    table: list[float] | None = None

    @model_validator(mode="after")
    def _one_form(self):
        if (self.power is None) == (self.table is None):
            raise ValueError("give exactly one of 'power' or 'table'")
        return self

    def spec(self) -> dict:
        return {"power": self.power} if self.power is not None else {"table": list(self.table)}


class InitialData(_Section):
    kind: Literal["zero", "white-noise", "mode"] = "zero"
    mode: int = Field(1, ge=1)
    l2_norm: float = Field(1.0, ge=0)


class ConvolutionLaw(_Section):
    s: float = -0.55
    b: float = 0.45
    horizons: list[float] = [0.25, 0.5, 1.0, 2.0]
    dt: float = Field(1.0 / 512, gt=0)
    paths: int = Field(1000, ge=2)
    variance_T: float = Field(0.1, gt=0)
    variance_paths: int = Field(100_000, ge=2)
    oracle_paths: int = Field(2000, ge=2)
    oracle_steps: int = Field(10_000, ge=1)


class SimulateSection(_Section):
    mode: Literal["trajectory", "energy-balance", "convolution-law"] = "trajectory"
    T: float = Field(1.0, ge=0)
    dt: float = Field(1e-3, gt=0)
    paths: int = Field(1, ge=1)
    scheme: Literal["exponential-euler", "euler-maruyama", "strang-split"] = "exponential-euler"
    kdv_method: Literal["midpoint", "lawson-rk4"] = "midpoint"
    coefficient: float = -1.0
    nonlinear: bool = True
    stride: int = Field(1, ge=1)
    checkpoints: int = Field(5, ge=1)
    initial: InitialData = InitialData()
    snapshots: bool = False
    convolution: ConvolutionLaw = ConvolutionLaw()


class InvarianceSection(_Section):
    test: Literal["flow", "generator"] = "flow"
    flow: Literal["ou", "kdv", "split", "full"] = "ou"
    T: float | list[float] = 1.0
    dt: float | list[float] | None = None
    paths: int = Field(10_000, ge=2)
    chunk: int = Field(2000, ge=1)
    alpha: float = Field(1e-3, gt=0, lt=1)
    repeats: int = Field(0, ge=0)
    repeat_paths: int | None = Field(None, ge=2)
    uniformity_level: float = Field(1e-2, gt=0, lt=1)
    drift_limit: float = Field(1e-6, gt=0)
    coefficient: float = -1.0
    parts: list[Literal["L1", "L2", "full"]] = ["L1", "L2", "full"]
    samples: int = Field(1_000_000, ge=2)
    battery_size: int = Field(len(inv.BATTERY_SPECS), ge=0, le=len(inv.BATTERY_SPECS))


class BilinearSection(_Section):
    modes: list[int] = [32, 64]
    s: float = -0.55
    eps: float = Field(0.05, gt=0, lt=0.5)
    gamma: float = Field(0.05, gt=0)
    T: float = Field(1e-3, gt=0)
    samples: int = Field(1000, ge=1)
    max_change: float = Field(2.0, gt=1)


class MildSection(_Section):
    task: Literal["contraction", "cross-method"] = "contraction"
    s: float = -0.55
    eps: float = Field(0.05, gt=0, lt=1 / 16)
    gamma: float | None = None
    C: float | None = Field(None, gt=0)
    horizon: float = Field(0.05, gt=0)
    samples: int = Field(64, ge=4)
    quantile: float = Field(0.95, gt=0, lt=1)
    pilot: int = Field(64, ge=1)
    calibration_samples: int = Field(16, ge=1)
    draws: int = Field(100, ge=1)
    levels: int = Field(5, ge=2)
    pass_fraction: float = Field(0.95, gt=0, le=1)
    residual_limit: float = Field(1e-8, gt=0)
    distance_limit: float = Field(1e-3, gt=0)


class LemmaSection(_Section):
    checks: list[Literal["kernel", "sup-sum", "convolution-integral", "gain-power"]] = [
        "kernel", "sup-sum", "convolution-integral", "gain-power"]
    kernel_s: float = -0.5
    kernel_eps: float = 0.05
    kernel_n_max: list[int] = [128, 256]
    sup_delta: float = Field(0.6, gt=0.5)
    sup_n_max: list[int] = [1000, 2000]
    integral_deltas: tuple[float, float] = (0.94, 0.98)
    integral_a: list[float] = [0.0, 10.0, 100.0, 1000.0]
    integral_spread: float = 10.0
    gain_b: list[float] = [0.3, 0.4, 0.45]
    gain_s: float = -0.55
    stability: float = 0.05
    slope_tolerance: float = 0.1


class MomentAuditSection(_Section):
    T: float = Field(1.0, gt=0)
    dt: float = Field(1e-3, gt=0)
    paths: int = Field(1000, ge=2)
    powers: list[int] = [1, 2, 3]
    scheme: Literal["exponential-euler", "euler-maruyama", "strang-split"] = "strang-split"
    chunk: int = Field(1000, ge=1)
    initial: InitialData = InitialData(kind="mode", mode=1, l2_norm=1.0)


SECTIONS = {
    "simulate": "simulate",
    "invariance": "invariance",
    "bilinear": "bilinear",
    "mild": "mild",
    "lemma-check": "lemma",
    "moment-audit": "moment_audit",
}


class ExperimentConfig(_Section):
    kind: Literal["simulate", "invariance", "bilinear", "mild", "lemma-check", "moment-audit"]
    name: str = ""
    seed: int = Field(0, ge=0, lt=2**64)
    N: int = Field(16, ge=1)
    M: int | None = Field(None, ge=1)
    phi: PhiSpec | None = PhiSpec(power=0.0)
    out: str | None = None
    threads: int = Field(1, ge=1)
    formats: list[Literal["csv", "json"]] = ["csv", "json"]
    simulate: SimulateSection = SimulateSection()
    invariance: InvarianceSection = InvarianceSection()
    bilinear: BilinearSection = BilinearSection()
    mild: MildSection = MildSection()
    lemma: LemmaSection = LemmaSection()
    moment_audit: MomentAuditSection = MomentAuditSection()

    @model_validator(mode="after")
    def _grid(self):
        if self.M is not None and self.M < default_points(self.N):
            raise ValueError(f"M must be at least {default_points(self.N)} for N={self.N}")
        return self

    @property
    def section(self) -> _Section:
        return getattr(self, SECTIONS[self.kind])

    def resolved(self) -> dict:
        """Full configuration with only the active experiment section."""
        data = self.model_dump(mode="json")
        for key in SECTIONS.values():
            if key != SECTIONS[self.kind]:
                data.pop(key)
        return data

    def identity(self) -> dict:
        """Resolved configuration minus the execution settings (output root, threads)."""
        data = self.resolved()
        data.pop("out")
        data.pop("threads")
        return data

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.identity()).encode("utf-8")).hexdigest()

    def grid(self) -> TorusGrid:
        return TorusGrid(self.N, self.M or default_points(self.N))

    def phi_symbol(self) -> np.ndarray:
        if self.phi is None:
            return np.zeros(self.N)
        return phi_operator(self.phi.spec(), self.grid()).symbol.real.copy()


def _loc(loc: Sequence) -> str:
    return ".".join(str(p) for p in loc) or "<root>"


def parse_config(data: Mapping[str, Any], **overrides) -> ExperimentConfig:
    """Validate a mapping; ``overrides`` with value ``None`` are ignored."""
    if not isinstance(data, Mapping):
        raise ConfigError([("<root>", "configuration must be a mapping")])
    merged = dict(data)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError([(_loc(e["loc"]), e["msg"]) for e in exc.errors()]) from None


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    """Read YAML or JSON (JSON is a YAML subset) and validate it."""
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError([("<file>", f"cannot parse {path}: {exc}")]) from None
    return parse_config(data or {}, **overrides)


# --------------------------------------------------------------------------- presets

PRESETS: dict[str, dict] = {
    "energy-balance": {
        "kind": "simulate", "N": 32, "phi": {"power": 1.0},
        "simulate": {"mode": "energy-balance", "T": 1.0, "dt": 1e-4, "paths": 1000, "checkpoints": 5},
    },
    "ou-invariance": {
        "kind": "invariance", "N": 16, "phi": {"power": 0.0},
        "invariance": {"flow": "ou", "T": [0.1, 1.0, 10.0], "paths": 100_000, "chunk": 20_000,
                       "repeats": 50, "repeat_paths": 10_000},
    },
    "kdv-invariance": {
        "kind": "invariance", "N": 8, "phi": None,
        "invariance": {"flow": "kdv", "T": 1.0, "dt": 1e-3, "paths": 10_000},
    },
    "full-invariance": {
        "kind": "invariance", "N": 8, "phi": {"power": 0.0},
        "invariance": {"flow": "full", "T": 1.0, "dt": [1e-3, 5e-4, 2.5e-4], "paths": 10_000},
    },
    "generator-pairing": {
        "kind": "invariance", "N": 4, "phi": {"power": 0.0},
        "invariance": {"test": "generator", "samples": 1_000_000},
    },
    "stochastic-convolution": {
        "kind": "simulate", "N": 16, "phi": {"power": 0.83},
        "simulate": {"mode": "convolution-law"},
    },
    "contraction": {
        "kind": "mild", "N": 16, "phi": {"power": 0.83},
        "mild": {"task": "contraction", "draws": 100},
    },
    "cross-method": {
        "kind": "mild", "N": 16, "phi": {"power": 0.83},
        "mild": {"task": "cross-method", "draws": 3, "levels": 5},
    },
    "bilinear-sweep": {
        "kind": "bilinear", "bilinear": {"modes": [32, 64], "samples": 1000},
    },
    "lemma-checks": {"kind": "lemma-check"},
    "moment-audit": {
        "kind": "moment-audit", "N": 16, "phi": {"power": 1.0},
        "moment_audit": {"T": 1.0, "paths": 1000},
    },
    "invariance-smoke": {
        "kind": "invariance", "N": 8, "phi": {"power": 0.0},
        "invariance": {"flow": "split", "T": 0.1, "dt": 1e-3, "paths": 1000, "chunk": 1000},
    },
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError([("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")])
    return parse_config({**PRESETS[name], "name": name}, **overrides)


# --------------------------------------------------------------------------- serialisation


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """RFC 4180: CRLF line ends, minimal quoting, floats at 17 significant digits."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _plain(obj):
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_json(path: str | Path, obj) -> None:
    """UTF-8, sorted keys; non-finite floats become ``null``."""
    text = json.dumps(_plain(obj), sort_keys=True, indent=2, ensure_ascii=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------- experiment plumbing


class _Sink:
    """Collects the payload files of one run."""

    def __init__(self, run_dir: Path, formats: Sequence[str]):
        self.run_dir = run_dir
        self.formats = set(formats)
        self.files: list[str] = []
        self.lines: list[str] = []
        self.verdict: dict[str, bool] = {}
        self.records = 0

    def path(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.run_dir / name

    def table(self, name: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
        self.records += len(rows)
        if "csv" in self.formats:
            write_csv(self.path(name), header, rows)

    def json(self, name: str, obj) -> None:
        write_json(self.path(name), obj)

    def check(self, label: str, ok: bool) -> None:
        self.verdict[label] = bool(ok)


def _map(threads: int) -> Callable:
    if threads <= 1:
        return lambda fn, items: list(map(fn, items))

    def pooled(fn, items):
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))

    return pooled


def _chunks(total: int, size: int) -> list[tuple[int, int]]:
    return [(start, min(size, total - start)) for start in range(0, total, size)]


def initial_field(spec: InitialData, grid: TorusGrid, seed: int, offset: int, count: int) -> SpectralField:
    if spec.kind == "white-noise":
        return sample_white_noise(grid, seed, n_paths=count, path_offset=offset)
    c = np.zeros((count, grid.n_modes), dtype=np.complex128)
    if spec.kind == "mode":
        if spec.mode > grid.n_modes:
            raise RunError(f"initial mode {spec.mode} exceeds N={grid.n_modes}")
        c[:, spec.mode - 1] = spec.l2_norm / math.sqrt(2.0)
    return SpectralField(grid, c)


def _integrate_chunked(cfg: ExperimentConfig, icfg: IntegratorConfig, spec: InitialData, pmap) -> Trajectory:
    grid, sym = cfg.grid(), cfg.phi_symbol()
    paths = cfg.simulate.paths

    def one(chunk):
        start, count = chunk
        return integrate(initial_field(spec, grid, cfg.seed, start, count), sym, icfg, cfg.seed, path_offset=start)

    parts = pmap(one, _chunks(paths, CHUNK))
    cat = lambda arrs: np.concatenate(arrs, axis=1)
    return Trajectory(
        grid=grid,
        times=parts[0].times,
        states=cat([p.states for p in parts]) if icfg.store_states else None,
        observables={k: cat([p.observables[k] for p in parts]) for k in parts[0].observables},
        stride=icfg.stride,
        blown=np.concatenate([np.reshape(p.blown, -1) for p in parts]),
        failures=[f for p in parts for f in p.failures],
    )


# --------------------------------------------------------------------------- experiments


def _simulate(cfg: ExperimentConfig, sink: _Sink, pmap) -> None:
    sec = cfg.simulate
    if sec.mode == "convolution-law":
        return _convolution_law(cfg, sink)
    energy = sec.mode == "energy-balance"
    n_steps = int(round(sec.T / sec.dt))
    if energy and (n_steps == 0 or n_steps % sec.checkpoints):
        raise RunError("energy balance needs T/dt to be a positive multiple of the checkpoint count")
    stride = n_steps // sec.checkpoints if energy else sec.stride
    icfg = IntegratorConfig(
        dt=sec.dt, T=sec.T, scheme=sec.scheme, coefficient=sec.coefficient, nonlinear=sec.nonlinear,
        record=("l2_sq", "h1_sq", "h1_integral"), stride=stride,
        store_states=sec.snapshots and not energy, kdv_method=sec.kdv_method,
    )
    traj = _integrate_chunked(cfg, icfg, sec.initial, pmap)
    blown = int(np.sum(traj.blown))
    if energy:
        sym = cfg.phi_symbol()
        n = np.arange(1, cfg.N + 1)
        phi_h1 = 2.0 * float(np.sum(n**2 * sym**2))
        rows, ok = [], True
        h1 = traj.observables["h1_integral"]
        l2 = traj.observables["l2_sq"]
        for k in range(1, len(traj.times)):
            res = energy_residual(traj, sym, k - 1, k)
            t0, t1 = traj.times[k - 1], traj.times[k]
            observed = (l2[k] - l2[k - 1]) / (t1 - t0)
            predicted = -2.0 * (h1[k] - h1[k - 1]) / (t1 - t0) + 2.0 * phi_h1
            mean, se = float(np.nanmean(res)), float(np.nanstd(res, ddof=1) / math.sqrt(np.sum(np.isfinite(res))))
            z = mean / se if se > 0 else 0.0
            ok &= abs(z) < 4.0
            rows.append([k, t0, t1, float(np.nanmean(observed)), float(np.nanmean(predicted)), mean, se, z])
        sink.table("energy_balance.csv",
                   ["checkpoint", "t0", "t1", "observed_drift", "predicted_drift", "residual_mean",
                    "residual_se", "z"], rows)
        sink.check("drift within 4 SE at every checkpoint", ok)
        sink.check("no blowup", blown == 0)
        sink.lines.append(f"{len(rows)} checkpoints, max |z| = {max(abs(r[-1]) for r in rows):.3f}")
    else:
        if "csv" in sink.formats:
            traj.to_csv(sink.path("trajectory.csv"))
        sink.records += len(traj.times) * cfg.simulate.paths
        if sec.snapshots:
            traj.write_snapshots(sink.path("snapshots.bin"))
        sink.check("no blowup", blown == 0)
        sink.lines.append(f"{len(traj.times)} records per path, {cfg.simulate.paths} paths")
    sink.json("trajectory_summary.json", {"times": traj.times, "blown": blown,
                                          "failures": [str(f) for f in traj.failures]})


def _convolution_law(cfg: ExperimentConfig, sink: _Sink) -> None:
    law = cfg.simulate.convolution
    sym = cfg.phi_symbol()
    var = convolution_variance_check(sym, cfg.N, law.variance_T, law.variance_paths, cfg.seed,
                                     law.oracle_paths, law.oracle_steps)
    z_exact = (var["exact_mean"] - var["closed_form"]) / var["exact_se"]
    z_euler = (var["euler_mean"] - var["closed_form"]) / var["euler_se"]
    rows = [[n + 1, var["closed_form"][n], var["exact_mean"][n], var["exact_se"][n], z_exact[n],
             var["euler_mean"][n], var["euler_se"][n], z_euler[n]] for n in range(cfg.N)]
    sink.table("convolution_variance.csv", ["mode", "closed_form", "exact_mean", "exact_se", "exact_z",
                                            "euler_mean", "euler_se", "euler_z"], rows)
    growth = convolution_norm_growth(sym, cfg.N, law.s, law.b, law.horizons, law.paths, cfg.seed, law.dt)
    sink.table("convolution_growth.csv", ["T", "mean_norm_sq", "se"],
               [[T, m, s] for T, m, s in zip(growth["horizons"], growth["mean"], growth["se"])])
    sink.json("convolution_law.json", {"variance": var, "growth": growth})
    sink.check("exact sampler within 4 SE of closed form", np.all(np.abs(z_exact) < 4))
    sink.check("Euler oracle within 4 SE of closed form", np.all(np.abs(z_euler) < 4))
    sink.check("norm growth linear in T (R^2 > 0.99)", growth["r2"] > 0.99)
    sink.lines.append(f"max |z| exact {np.max(np.abs(z_exact)):.3f}, Euler {np.max(np.abs(z_euler)):.3f}; "
                      f"slope {growth['slope']:.4g}, R^2 {growth['r2']:.6f}")


def _invariance(cfg: ExperimentConfig, sink: _Sink, pmap) -> None:
    sec = cfg.invariance
    sym = cfg.phi_symbol()
    if sec.test == "generator":
        funcs = inv.battery(cfg.N)[: sec.battery_size]
        jobs = [(part, f) for part in sec.parts for f in funcs]
        out = pmap(lambda job: inv.generator_pairing(job[1], job[0], cfg.N, sec.samples, cfg.seed, sym,
                                                     sec.coefficient), jobs)
        rows = []
        for (part, f), (est, se) in zip(jobs, out):
            rows.append([part, f.label, est, se, est / se if se > 0 else 0.0, inv.pairing_passes(est, se)])
        sink.table("generator_pairing.csv", ["part", "function", "estimate", "se", "z", "passed"], rows)
        sink.json("generator_pairing.json", [dict(zip(["part", "function", "estimate", "se", "z", "passed"], r))
                                             for r in rows])
        for part in sec.parts:
            sink.check(f"{part}: every |estimate| < 4 SE", all(r[5] for r in rows if r[0] == part))
        sink.lines.append(f"{len(rows)} pairings, {sum(not r[5] for r in rows)} outside 4 SE")
        return

    horizons = sec.T if isinstance(sec.T, list) else [sec.T]
    run_one = lambda T, paths, seed: inv.invariance_test(sec.flow, cfg.N, sym, T, sec.dt, paths, seed, sec.chunk,
                                                         alpha=sec.alpha, coefficient=sec.coefficient)
    reports = pmap(lambda T: run_one(T, sec.paths, cfg.seed), horizons)
    payload: dict[str, Any] = {"reports": [r.to_dict() for r in reports]}
    rows = []
    for j, rep in enumerate(reports):
        for name, st in rep.to_dict()["statistics"].items():
            rows.append([j, rep.T, name, st["mean"], st["se"], st["target"], st["z"], st["p"]])
        label = f"T={rep.T:g}"
        sink.check(f"{label}: family-wise gate", rep.passed)
        if sec.flow == "kdv":
            sink.check(f"{label}: per-path L2 drift < {sec.drift_limit:g}", rep.max_norm_drift < sec.drift_limit)
        if sec.flow == "full":
            sink.check(f"{label}: level bias decreases with dt", rep.bias_monotone)
        sink.lines.append(f"{label}: max |z| {np.max(np.abs(rep.z)):.3f}, family p {rep.family_pvalue:.4g}, "
                          f"omnibus p {rep.omnibus_pvalue:.4g}, blown {rep.blown}")
    sink.table("zscores.csv", ["report", "T", "statistic", "mean", "se", "target", "z", "p"], rows)
    if sec.repeats:
        paths = sec.repeat_paths or sec.paths
        reps = pmap(lambda r: run_one(horizons[0], paths, cfg.seed + 1 + r), range(sec.repeats))
        pvals = [r.omnibus_pvalue for r in reps]
        ks_p = inv.pvalue_uniformity(pvals)
        payload["uniformity"] = {"T": horizons[0], "paths": paths, "seeds": [cfg.seed + 1 + r for r in range(sec.repeats)],
                                 "omnibus_pvalues": pvals, "ks_pvalue": ks_p}
        sink.table("uniformity.csv", ["seed", "omnibus_pvalue"],
                   [[cfg.seed + 1 + r, p] for r, p in enumerate(pvals)])
        sink.check(f"p-value uniformity KS p > {sec.uniformity_level:g}", ks_p > sec.uniformity_level)
        sink.lines.append(f"uniformity over {sec.repeats} seeds: KS p {ks_p:.4g}")
    sink.json("invariance.json", payload)


def _bilinear(cfg: ExperimentConfig, sink: _Sink, pmap) -> None:
    sec = cfg.bilinear
    sweeps = pmap(lambda n: xsb.bilinear_sweep(n, sec.s, sec.eps, sec.gamma, sec.T, sec.samples, cfg.seed),
                  sec.modes)
    rows = [[sw["n_modes"], i, r] for sw in sweeps for i, r in enumerate(sw["ratios"])]
    sink.table("bilinear_ratios.csv", ["N", "sample", "ratio"], rows)
    sink.json("bilinear.json", [{k: v for k, v in sw.items() if k != "ratios"} for sw in sweeps])
    maxima = [sw["max"] for sw in sweeps]
    sink.check("every maximum finite", all(math.isfinite(m) for m in maxima))
    changes = [max(a, b) / min(a, b) for a, b in zip(maxima, maxima[1:])]
    sink.check(f"max changes < {sec.max_change:g}x between successive N", all(c < sec.max_change for c in changes))
    for sw in sweeps:
        sink.lines.append(f"N={sw['n_modes']}: max {sw['max']:.5g} (sample {sw['witness']}), median {sw['median']:.5g}")


def _mild(cfg: ExperimentConfig, sink: _Sink, pmap) -> None:
    sec = cfg.mild
    sym = cfg.phi_symbol()
    base = mild.ContractionConfig(s=sec.s, eps=sec.eps, gamma=sec.gamma, horizon=sec.horizon,
                                  samples=sec.samples, C=sec.C or 1.0)
    if sec.C is None:
        ccfg, cal, history = mild.self_consistent_horizon(cfg.N, sym, base, sec.quantile, sec.pilot,
                                                          sec.calibration_samples, cfg.seed)
        sink.json("calibration.json", {"C": ccfg.C, "horizon": ccfg.horizon, "calibration": cal.as_dict(),
                                       "history": history})
    else:
        ccfg = base
    if sec.task == "contraction":
        trials = pmap(lambda d: mild.contraction_trial(cfg.N, sym, ccfg, cfg.seed, d), range(sec.draws))
        keys = list(trials[0])
        sink.table("contraction.csv", keys, [[t[k] for k in keys] for t in trials])
        good = sum(t["contraction_factor"] <= 0.5 for t in trials)
        need = math.ceil(sec.pass_fraction * sec.draws - 1e-9)
        sink.check(f"Lipschitz factor <= 1/2 in >= {need} of {sec.draws}", good >= need)
        sink.check(f"final residual < {sec.residual_limit:g}", all(t["final_residual"] < sec.residual_limit for t in trials))
        sink.lines.append(f"C = {ccfg.C:.5g}, horizon {ccfg.horizon:.5g}; factor <= 1/2 in {good}/{sec.draws}; "
                          f"max factor {max(t['contraction_factor'] for t in trials):.4f}")
        return
    series = pmap(lambda d: mild.cross_method_trial(cfg.N, sym, ccfg, cfg.seed, d, sec.levels), range(sec.draws))
    keys = ["level", "dt", "steps", "distance", "iterations", "converged"]
    sink.table("cross_method.csv", ["draw"] + keys, [[d] + [r[k] for k in keys] for d, s in enumerate(series) for r in s])
    for d, s in enumerate(series):
        dist = [r["distance"] for r in s]
        sink.check(f"draw {d}: distance decreases", all(b < a for a, b in zip(dist, dist[1:])))
        sink.check(f"draw {d}: final distance < {sec.distance_limit:g}", dist[-1] < sec.distance_limit)
        sink.lines.append(f"draw {d}: " + ", ".join(f"{x:.3g}" for x in dist))


def _lemma(cfg: ExperimentConfig, sink: _Sink, pmap) -> None:
    sec = cfg.lemma
    rows, payload = [], {}

    def stable(label, values):
        change = abs(values[-1] - values[0]) / abs(values[0])
        sink.check(f"{label} changes < {sec.stability:.0%}", change < sec.stability)
        return change

    if "kernel" in sec.checks:
        res = pmap(lambda n: xsb.kernel_bound_check(n, sec.kernel_s, sec.kernel_eps), sec.kernel_n_max)
        rows += [["kernel", "n_max", r["n_max"], r["max"]] for r in res]
        payload["kernel"] = {"results": res, "change": stable("kernel maximum", [r["max"] for r in res])}
    if "sup-sum" in sec.checks:
        res = pmap(lambda n: xsb.sup_sum_check(sec.sup_delta, n), sec.sup_n_max)
        rows += [["sup-sum", "n_max", r["n_max"], r["max"]] for r in res]
        payload["sup_sum"] = {"results": res, "change": stable("sup-sum maximum", [r["max"] for r in res])}
    if "convolution-integral" in sec.checks:
        d1, d2 = sec.integral_deltas
        res = [xsb.convolution_integral_check(d1, d2, a) for a in sec.integral_a]
        rows += [["convolution-integral", "a", r["a"], r["ratio"]] for r in res]
        ratios = [r["ratio"] for r in res]
        spread = max(ratios) / min(ratios)
        sink.check(f"integral ratio spread < {sec.integral_spread:g}x", spread < sec.integral_spread)
        payload["convolution_integral"] = {"results": res, "spread": spread}
    if "gain-power" in sec.checks:
        res = pmap(lambda b: xsb.gain_power_check(b, sec.gain_s, seed=cfg.seed), sec.gain_b)
        rows += [["gain-power", "b", r["b"], r["slope"]] for r in res]
        for r in res:
            sink.check(f"b={r['b']:g}: slope within {sec.slope_tolerance:g} of 1/2-b",
                       abs(r["slope"] - r["target"]) < sec.slope_tolerance)
        payload["gain_power"] = res
    sink.table("lemma_checks.csv", ["check", "parameter", "value", "result"], rows)
    sink.json("lemma_checks.json", payload)
    sink.lines.extend(f"{r[0]} {r[1]}={_fmt(r[2])}: {r[3]:.6g}" for r in rows)


def _moment_audit(cfg: ExperimentConfig, sink: _Sink, pmap) -> None:
    sec = cfg.moment_audit
    u0 = initial_field(sec.initial, cfg.grid(), cfg.seed, 0, 1)
    audit = inv.moment_growth_audit(cfg.phi_symbol(), cfg.N, sec.T, sec.paths, SpectralField(u0.grid, u0.coeffs[0]),
                                    tuple(sec.powers), sec.dt, sec.scheme, cfg.seed, sec.chunk)
    sink.table("moment_audit.csv", ["time", "mean_running_sup"], list(zip(audit.times, audit.sup_mean)))
    sink.json("moment_audit.json", audit.to_dict())
    sink.check("fitted C finite", math.isfinite(audit.fitted_C))
    sink.check("sup bound holds", audit.bound_holds)
    for p, ok in audit.jensen_ok().items():
        sink.check(f"p={p} moment finite and Jensen-consistent", ok and math.isfinite(audit.moments[p][0]))
    sink.lines.append(f"E sup ||u||^2 = {audit.moments[1][0]:.5g} +- {audit.moments[1][1]:.2g}; "
                      f"fitted C = {audit.fitted_C:.5g}; Burkholder bound {audit.burkholder_bound:.5g}")


EXPERIMENTS = {
    "simulate": _simulate,
    "invariance": _invariance,
    "bilinear": _bilinear,
    "mild": _mild,
    "lemma-check": _lemma,
    "moment-audit": _moment_audit,
}


# --------------------------------------------------------------------------- runs


def _versions() -> dict:
    from . import __version__

    out = {"python": platform.python_version(), "skdvb": __version__}
    for pkg in ("numpy", "scipy", "pydantic", "PyYAML"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def output_root(cfg: ExperimentConfig, out: str | Path | None = None) -> Path:
    return Path(out or cfg.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def run_directory(cfg: ExperimentConfig, out: str | Path | None = None) -> Path:
    return output_root(cfg, out) / f"{cfg.kind}-{cfg.config_hash()[:12]}"


class RunOutcome(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    status: int
    run_dir: Path
    verdict: dict[str, bool]
    passed: bool
    error: str | None = None


def run(cfg: ExperimentConfig, out: str | Path | None = None) -> RunOutcome:
    """Execute ``cfg`` and write payloads, ``summary.md`` and ``manifest.json``.

    The status is 0 on success (whatever the verdict), 1 when the experiment
    raised; in that case the manifest marks the written files as partial.
    """
    run_dir = run_directory(cfg, out)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "manifest.json").unlink(missing_ok=True)
    sink = _Sink(run_dir, cfg.formats)
    sink.json("config.json", {"config": cfg.identity(), "config_hash": cfg.config_hash()})
    started = time.time()
    error = None
    try:
        EXPERIMENTS[cfg.kind](cfg, sink, _map(cfg.threads))
    except Exception as exc:  # recorded in the manifest, reported as a nonzero status
        error = f"{type(exc).__name__}: {exc}"
    wall = time.time() - started
    passed = error is None and all(sink.verdict.values())
    sink.json("results.json", {"kind": cfg.kind, "records": sink.records, "verdict": sink.verdict,
                               "passed": passed, "complete": error is None})
    _write_summary(cfg, sink, passed, error)
    write_json(run_dir / "manifest.json", {
        "config_hash": cfg.config_hash(),
        "kind": cfg.kind,
        "name": cfg.name,
        "seed": cfg.seed,
        "threads": cfg.threads,
        "versions": _versions(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "wall_time_s": wall,
        "status": "failed" if error else "ok",
        "partial": error is not None,
        "error": error,
        "files": {name: file_sha256(run_dir / name) for name in sorted(sink.files)},
    })
    return RunOutcome(status=1 if error else 0, run_dir=run_dir, verdict=sink.verdict, passed=passed, error=error)


def _write_summary(cfg: ExperimentConfig, sink: _Sink, passed: bool, error: str | None) -> None:
    title = cfg.name or cfg.kind
    lines = [f"# {title}", "", f"- kind: `{cfg.kind}`", f"- config hash: `{cfg.config_hash()}`",
             f"- seed: {cfg.seed}", f"- records: {sink.records}", ""]
    if error:
        lines += [f"**Run failed**: {error}", "", "Files listed in the manifest are partial.", ""]
    lines += ["## Verdict", ""]
    lines += [f"- {'PASS' if ok else 'FAIL'}: {label}" for label, ok in sink.verdict.items()] or ["- no checks"]
    lines += ["", f"Overall: {'PASS' if passed else 'FAIL'}", ""]
    if sink.lines:
        lines += ["## Details", ""] + [f"- {line}" for line in sink.lines] + [""]
    sink.path("summary.md").write_text("\n".join(lines), encoding="utf-8")


# --------------------------------------------------------------------------- reports


def _histogram_rows(header, rows, bins=20):
    by_n: dict[str, list[float]] = {}
    for n, _, r in rows:
        by_n.setdefault(n, []).append(float(r))
    out = []
    for n, vals in by_n.items():
        counts, edges = np.histogram(vals, bins=bins)
        out += [[int(n), edges[i], edges[i + 1], int(c)] for i, c in enumerate(counts)]
    return out


def report(run_dir: str | Path) -> Path:
    """Write ``report.md`` and tidy series under ``series/``; returns the report path."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest in {run_dir}; not a completed run")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    results_path = run_dir / "results.json"
    results = json.loads(results_path.read_text(encoding="utf-8")) if results_path.is_file() else {}
    series = run_dir / "series"
    series.mkdir(exist_ok=True)
    lines = [f"# Report: {manifest.get('name') or manifest.get('kind')}", "",
             f"- config hash: `{manifest.get('config_hash')}`", f"- status: {manifest.get('status')}",
             f"- wall time: {manifest.get('wall_time_s', float('nan')):.2f} s", ""]
    records = int(results.get("records", 0))
    if records == 0:
        lines += ["The results set is empty: zero records were produced.", ""]
    else:
        lines += [f"{records} records.", ""]
    written = []
    if (run_dir / "energy_balance.csv").is_file():
        header, rows = read_csv(run_dir / "energy_balance.csv")
        idx = {h: i for i, h in enumerate(header)}
        write_csv(series / "energy_drift.csv", ["time", "observed_drift", "predicted_drift"],
                  [[r[idx["t1"]], r[idx["observed_drift"]], r[idx["predicted_drift"]]] for r in rows])
        written.append("energy_drift.csv")
    if (run_dir / "invariance.json").is_file():
        payload = json.loads((run_dir / "invariance.json").read_text(encoding="utf-8"))
        out_rows = []
        for j, rep in enumerate(payload["reports"]):
            for name in sorted(rep["statistics"]):
                st = rep["statistics"][name]
                out_rows.append([j, rep["T"], name, st["z"], st["p"]])
        write_csv(series / "zscores.csv", ["report", "T", "statistic", "z", "p"], out_rows)
        written.append("zscores.csv")
        lines += ["| report | T | statistic | z |", "|---|---|---|---|"]
        lines += [f"| {r[0]} | {_fmt(r[1])} | {r[2]} | {_fmt(r[3])} |" for r in out_rows] + [""]
    if (run_dir / "bilinear_ratios.csv").is_file():
        header, rows = read_csv(run_dir / "bilinear_ratios.csv")
        write_csv(series / "ratio_histogram.csv", ["N", "bin_low", "bin_high", "count"], _histogram_rows(header, rows))
        written.append("ratio_histogram.csv")
    verdict = results.get("verdict", {})
    if verdict:
        lines += ["## Verdict", ""] + [f"- {'PASS' if ok else 'FAIL'}: {k}" for k, ok in verdict.items()] + [""]
    if written:
        lines += ["## Series", ""] + [f"- `series/{name}`" for name in written] + [""]
    out = run_dir / "report.md"
    out.write_text("\n".join(lines), encoding="utf-8")
    return out


__all__ = [
    "KINDS",
    "OUT_ENV",
    "PRESETS",
    "ConfigError",
    "ExperimentConfig",
    "RunError",
    "RunOutcome",
    "canonical_json",
    "load_config",
    "parse_config",
    "preset",
    "read_csv",
    "report",
    "run",
    "run_directory",
    "write_csv",
    "write_json",
]
