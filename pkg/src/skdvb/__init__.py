"""Spectral-Galerkin laboratory for the stochastic KdV-Burgers equation on the torus.

The submodules are layered: ``spectral`` (grids, transforms, the truncated
nonlinearity), ``noise`` (counter-based randomness, white noise, stochastic
convolutions), ``dynamics`` (time integrators), ``xsb`` (Fourier restriction
norms and lemma checkers), ``mild`` (Picard iteration for the Duhamel form),
``invariance`` (Monte Carlo law tests) and ``harness`` (configs, runs and
reports).
"""

from importlib import metadata

from .dynamics import IntegratorConfig, StepFailure, Trajectory, integrate
from .harness import ExperimentConfig, load_config, parse_config, preset, report, run
from .invariance import (
    EnsembleStats,
    TestFunctionPoly,
    generator_pairing,
    invariance_test,
    moment_growth_audit,
)
from .mild import ContractionConfig, picard_solve, stopping_time
from .noise import (
    ConvolutionPath,
    NoiseStream,
    phi_operator,
    sample_brownian,
    sample_white_noise,
)
from .spectral import MultiplierOp, SpectralField, TorusGrid
from .xsb import SpaceTimeField, bilinear_ratio, xsb_norm

try:
    __version__ = metadata.version("artifact")
except metadata.PackageNotFoundError:
    __version__ = "0.0.0"

__all__ = [
    "ContractionConfig",
    "ConvolutionPath",
    "EnsembleStats",
    "ExperimentConfig",
    "IntegratorConfig",
    "MultiplierOp",
    "NoiseStream",
    "SpaceTimeField",
    "SpectralField",
    "StepFailure",
    "TestFunctionPoly",
    "TorusGrid",
    "Trajectory",
    "bilinear_ratio",
    "generator_pairing",
    "integrate",
    "invariance_test",
    "load_config",
    "moment_growth_audit",
    "parse_config",
    "phi_operator",
    "picard_solve",
    "preset",
    "report",
    "run",
    "sample_brownian",
    "sample_white_noise",
    "stopping_time",
    "xsb_norm",
]
