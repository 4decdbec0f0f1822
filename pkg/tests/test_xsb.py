import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import bracket, quad

from skdvb.xsb import (
    SpaceTimeField,
    bilinear_ratio,
    bilinear_sweep,
    convolution_integral,
    convolution_integral_check,
    fft_length,
    gain_power_check,
    kernel_bound_check,
    kernel_ratio,
    product_norm_by_convolution,
    product_resolving_step,
    product_samples,
    random_field,
    space_time_l2,
    sup_sum_check,
    sup_sum_value,
    xsb_norm,
)


def dft_norm_sq(samples, dt, n, s, b, n_fft):
    """``2 <n>^{2s} sum_k w_k |u~(n^3 + sigma_k)|^2 dtau`` with an explicit DFT matrix."""
    j = np.arange(len(samples))
    k = np.arange(n_fft)
    sigma = 2 * math.pi * np.where(k < (n_fft + 1) // 2, k, k - n_fft) / (n_fft * dt)
    co = samples * np.exp(-1j * n**3 * dt * j)
    spec = np.exp(-1j * np.outer(sigma, dt * j)) @ co * dt / math.sqrt(2 * math.pi)
    w = (1 + sigma**2 + n**4) ** b
    return 2 * (1 + n * n) ** s * np.sum(w * np.abs(spec) ** 2) * 2 * math.pi / (n_fft * dt)


# ---------------------------------------------------------------- norm


def test_zero_field_has_zero_norm():
    assert xsb_norm(SpaceTimeField(0.01, np.zeros((20, 3))), -0.5, 0.4) == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n_times=st.integers(1, 80), n_modes=st.integers(1, 6))
def test_unweighted_norm_is_space_time_l2(seed, n_times, n_modes):
    rng = np.random.default_rng(seed)
    f = SpaceTimeField(0.01, rng.standard_normal((n_times, n_modes)) + 1j * rng.standard_normal((n_times, n_modes)))
    assert xsb_norm(f, 0.0, 0.0) == pytest.approx(space_time_l2(f), rel=1e-12)


def test_box_in_time_matches_dirichlet_kernel_quadrature():
    # u_1(t) = exp(i t) on [0, 1]: in the co-moving frame the sampled spectrum is a Dirichlet kernel
    dt, s, b = 1 / 64, -0.55, 0.4
    J = 64
    t = dt * np.arange(J + 1)
    f = SpaceTimeField(dt, np.exp(1j * t)[:, None])

    def spectrum_sq(sig):
        half = sig * dt / 2
        if abs(math.sin(half)) < 1e-12:
            return dt**2 * (J + 1) ** 2 / (2 * math.pi)
        return dt**2 / (2 * math.pi) * (math.sin((J + 1) * half) / math.sin(half)) ** 2

    lobe = 2 * math.pi / ((J + 1) * dt)
    edges = np.append(np.arange(-math.pi / dt, math.pi / dt, lobe / 2), math.pi / dt)
    integral = sum(quad(lambda x: spectrum_sq(x) * (2 + x * x) ** b, lo, hi) for lo, hi in zip(edges, edges[1:]))
    oracle = math.sqrt(2 * 2**s * integral)
    assert xsb_norm(f, s, b, T=1.0) == pytest.approx(oracle, rel=1e-6)


def test_norm_of_single_mode_matches_explicit_dft():
    rng = np.random.default_rng(3)
    dt = 0.01
    x = rng.standard_normal(33) + 1j * rng.standard_normal(33)
    f = SpaceTimeField(dt, np.stack([np.zeros(33), x], axis=1))
    n_fft = fft_length(33)
    assert xsb_norm(f, 0.3, 0.45) == pytest.approx(math.sqrt(dft_norm_sq(x, dt, 2, 0.3, 0.45, n_fft)), rel=1e-12)


def test_padding_doubling_is_stable():
    rng = np.random.default_rng(4)
    f = random_field(4, 1e-3, 257, rng)
    base = xsb_norm(f, -0.55, 0.45, T=0.2)
    doubled = xsb_norm(f, -0.55, 0.45, T=0.2, n_fft=2 * fft_length(201))
    assert doubled == pytest.approx(base, rel=1e-3)


def test_cutoff_outside_window_raises():
    f = SpaceTimeField(0.1, np.ones((5, 1)))
    with pytest.raises(ValueError):
        xsb_norm(f, 0, 0.4, T=1.0)
    with pytest.raises(ValueError):
        f + SpaceTimeField(0.2, np.ones((5, 1)))


def test_unweighted_cutoff_norm_increases_with_horizon():
    f = random_field(3, 1e-3, 501, np.random.default_rng(5))
    vals = [xsb_norm(f, -0.55, 0.0, T) for T in (0.1, 0.2, 0.4)]
    assert vals[0] < vals[1] < vals[2]


@pytest.mark.parametrize("b", [0.3, 0.4, 0.45])
def test_gain_power_slope(b):
    r = gain_power_check(b)
    assert abs(r["slope"] - (0.5 - b)) < 0.1


# ---------------------------------------------------------------- bilinear ratio


def test_single_mode_product_matches_direct_sums():
    dt = product_resolving_step(1)
    J = 200
    T = dt * J
    t = dt * np.arange(J + 1)
    u1 = np.exp(-t + 1j * t) * (0.3 + 0.8j)
    v1 = np.exp(-t + 1j * t) * (1.1 - 0.2j)
    u, v = SpaceTimeField(dt, u1[:, None]), SpaceTimeField(dt, v1[:, None])
    s, b, gamma = -0.55, 0.45, 0.05
    n_fft = fft_length(J + 1)
    # d/dx (u v) only has mode 2 = 1 + 1, with coefficient 2 i u_1 v_1
    num = dft_norm_sq(2j * u1 * v1, dt, 2, s, -0.5 + gamma, n_fft)
    den_u = dft_norm_sq(u1, dt, 1, s, b, n_fft)
    den_v = dft_norm_sq(v1, dt, 1, s, b, n_fft)
    oracle = math.sqrt(num / (den_u * den_v))
    assert bilinear_ratio(u, v, s, b, gamma, T) == pytest.approx(oracle, rel=1e-8)
    prod = product_samples(u, v).values
    np.testing.assert_allclose(prod[:, 1], 2j * u1 * v1, atol=1e-14)
    assert np.max(np.abs(prod[:, 0])) < 1e-14


def test_convolution_route_agrees_with_physical_route():
    rng = np.random.default_rng(6)
    dt = 2 * math.pi / 256
    u = random_field(3, dt, 40, rng)
    v = random_field(3, dt, 40, rng)
    T = dt * 30
    n_fft = 512
    direct = xsb_norm(product_samples(u, v, T), -0.55, -0.45, n_fft=n_fft)
    conv = product_norm_by_convolution(u, v, -0.55, -0.45, T, n_fft)
    assert conv == pytest.approx(direct, rel=1e-10)
    with pytest.raises(ValueError):
        product_norm_by_convolution(u, v, -0.55, -0.45, T, 500)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_bilinear_ratio_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    dt = product_resolving_step(4)
    u, v = random_field(4, dt, 60, rng), random_field(4, dt, 60, rng)
    T = dt * 59
    assert bilinear_ratio(u, v, -0.55, 0.45, 0.05, T) == bilinear_ratio(v, u, -0.55, 0.45, 0.05, T)


def test_bilinear_ratio_rejects_zero_field():
    u = SpaceTimeField(0.01, np.zeros((5, 2)))
    with pytest.raises(ValueError):
        bilinear_ratio(u, u, -0.55, 0.45, 0.05, 0.04)


def test_small_sweep_is_finite_and_reproducible():
    a = bilinear_sweep(4, -0.55, 0.05, 0.05, 1e-3, 6, seed=1)
    b = bilinear_sweep(4, -0.55, 0.05, 0.05, 1e-3, 6, seed=1)
    assert np.all(np.isfinite(a["ratios"])) and np.array_equal(a["ratios"], b["ratios"])
    assert a["max"] == a["ratios"][a["witness"]]


# ---------------------------------------------------------------- lemma checkers


def test_kernel_ratio_single_triple():
    s, eps = -0.5, 0.05
    expected = 2 * bracket(2) ** s / (bracket(1) ** s * bracket(1) ** s * bracket(2) ** (0.5 - eps) * 2 ** (4 * eps))
    assert kernel_ratio(1, 1, s, eps) == pytest.approx(expected, rel=1e-14)


def test_kernel_check_enumerates_every_triple():
    r = kernel_bound_check(6, -0.5, 0.05)
    brute = max(kernel_ratio(a, b, -0.5, 0.05) for a in range(-6, 7) for b in range(-6, 7)
                if a and b and a + b and abs(a + b) <= 6)
    assert r["max"] == pytest.approx(brute, rel=1e-14)
    n, n1, n2 = r["witness"]
    assert n == n1 + n2 and kernel_ratio(n1, n2, -0.5, 0.05) == pytest.approx(r["max"])


def test_kernel_maximum_stable_under_doubling():
    a, b = kernel_bound_check(128, -0.5, 0.05)["max"], kernel_bound_check(256, -0.5, 0.05)["max"]
    assert abs(b - a) / a < 0.05


def test_kernel_maximum_grows_when_hypothesis_fails():
    vals = [kernel_bound_check(n, -0.7, 0.05) for n in (32, 64, 128)]
    assert not vals[0]["hypothesis_ok"]
    assert vals[0]["max"] < vals[1]["max"] < vals[2]["max"]


def test_sup_sum_single_value_matches_direct_summation():
    oracle = sum((1 + abs(0 - k * (1 - k))) ** -1.0 for k in range(-1000, 1001) if k not in (0, 1))
    assert sup_sum_value(1, 0.0, 1.0, 1000) == pytest.approx(oracle, rel=1e-13)


def test_sup_sum_stable_under_doubling():
    a = sup_sum_check(0.6, 1000)["max"]
    b = sup_sum_check(0.6, 2000)["max"]
    assert abs(b - a) / a < 0.05


def test_sup_sum_is_monotone_in_delta_and_grows_below_one_half():
    grid = dict(mu_grid=np.arange(-50, 200), n_values=np.arange(1, 17))
    assert sup_sum_check(0.9, 300, **grid)["max"] <= sup_sum_check(0.6, 300, **grid)["max"]
    low = [sup_sum_check(0.4, n, **grid) for n in (100, 200, 400)]
    assert not low[0]["hypothesis_ok"] and low[0]["max"] < low[1]["max"] < low[2]["max"]


def test_convolution_integral_standard_value():
    assert convolution_integral(1.0, 1.0, 0.0) == pytest.approx(math.pi, abs=1e-8)


def test_convolution_integral_ratio_bounded_over_sweep():
    ratios = [convolution_integral_check(0.94, 0.98, a)["ratio"] for a in (0, 10, 100, 1000)]
    assert max(ratios) / min(ratios) < 10


@pytest.mark.parametrize("a", [0.5, 7.0, 300.0])
def test_convolution_integral_is_even_in_a(a):
    assert convolution_integral(0.7, 0.9, a) == pytest.approx(convolution_integral(0.7, 0.9, -a), rel=1e-9)


def test_convolution_integral_rejects_bad_exponents():
    for d1, d2 in ((0.3, 0.5), (0.9, 0.8), (0.0, 1.2)):
        with pytest.raises(ValueError):
            convolution_integral(d1, d2, 1.0)
