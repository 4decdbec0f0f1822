"""Slow, independent reference computations used as test oracles.

Nothing here calls into the package: every routine is a literal
transcription of a definition (direct sums, loops, quadrature).
"""

import math

import numpy as np
from scipy import integrate


def full_modes(c):
    """Dict ``n -> c_n`` over ``0 < |n| <= N`` from positive-mode coefficients."""
    out = {}
    for k, v in enumerate(c):
        out[k + 1] = complex(v)
        out[-(k + 1)] = complex(np.conj(v))
    return out


def synthesize_direct(c, m):
    """``u(x_j) = sum_{0<|n|<=N} c_n e^{i n x_j}`` by an explicit double loop."""
    modes = full_modes(c)
    u = np.zeros(m)
    for j in range(m):
        x = 2 * math.pi * j / m
        u[j] = sum(v * complex(math.cos(n * x), math.sin(n * x)) for n, v in modes.items()).real
    return u


def analyze_direct(u, n_modes):
    """Trapezoid quadrature ``c_n = (1/M) sum_j u_j e^{-i n x_j}``."""
    m = len(u)
    x = 2 * math.pi * np.arange(m) / m
    return np.array([np.sum(u * np.exp(-1j * n * x)) / m for n in range(1, n_modes + 1)])


def nonlinearity_direct(c, coefficient=1.0):
    """``coefficient * i n * sum_{n1 + n2 = n} c_n1 c_n2`` for ``n = 1..N``."""
    modes = full_modes(c)
    n_modes = len(c)
    out = np.zeros(n_modes, dtype=complex)
    for n in range(1, n_modes + 1):
        acc = 0j
        for n1, v1 in modes.items():
            n2 = n - n1
            if n2 in modes:
                acc += v1 * modes[n2]
        out[n - 1] = coefficient * 1j * n * acc
    return out


def bracket(x):
    return math.sqrt(1.0 + x * x)


def gauss_hermite_expectation(fn, dims, points=3):
    """``E f(X)`` for ``X`` with i.i.d. ``N(0, 1/2)`` coordinates, exact for polynomials
    of degree ``<= 2 * points - 1`` in each coordinate (tensor Gauss-Hermite rule)."""
    nodes, weights = np.polynomial.hermite.hermgauss(points)
    weights = weights / math.sqrt(math.pi)
    total = 0.0
    for idx in np.ndindex(*([points] * dims)):
        x = np.array([nodes[i] for i in idx])
        w = math.prod(weights[i] for i in idx)
        total += w * fn(x)
    return total


def quad(fn, a, b, **kw):
    value, _ = integrate.quad(fn, a, b, limit=500, epsabs=1e-13, epsrel=1e-12, **kw)
    return value
