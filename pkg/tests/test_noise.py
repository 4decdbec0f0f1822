import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import quad
from scipy import stats

from skdvb.noise import (
    ConvolutionPath,
    NoiseStream,
    complex_normals,
    continuity_modulus,
    convolution_norm_growth,
    convolution_variance,
    convolution_variance_check,
    hs_norm,
    phi_operator,
    phi_symbol,
    sample_brownian,
    sample_white_noise,
    standard_normals,
    stochastic_convolution_step,
)
from skdvb.spectral import MultiplierOp, SpectralField, TorusGrid, l2_sq


def within(mean, se, target, k=4.0):
    return np.all(np.abs(np.asarray(mean) - target) <= k * np.asarray(se))


# ---------------------------------------------------------------- counter-based streams


def test_white_noise_is_reproducible():
    g = TorusGrid(8)
    a = sample_white_noise(g, 123)
    b = sample_white_noise(g, 123)
    assert np.array_equal(a.coeffs, b.coeffs)
    assert not np.array_equal(a.coeffs, sample_white_noise(g, 124).coeffs)


@settings(max_examples=25, deadline=None)
@given(total=st.integers(1, 300), cut=st.integers(0, 300), seed=st.integers(0, 2**64 - 1))
def test_draws_do_not_depend_on_how_paths_are_chunked(total, cut, seed):
    cut = min(cut, total)
    whole = standard_normals(seed, "s", 7, total, (3,))
    parts = [standard_normals(seed, "s", 7, cut, (3,))] if cut else []
    if total - cut:
        parts.append(standard_normals(seed, "s", 7, total - cut, (3,), path_offset=cut))
    assert np.array_equal(whole, np.concatenate(parts))


def test_streams_counters_and_lanes_are_distinct():
    a = complex_normals(1, "x", 0, 4, 3)
    assert not np.array_equal(a, complex_normals(1, "y", 0, 4, 3))
    assert not np.array_equal(a, complex_normals(1, "x", 1, 4, 3))
    assert not np.array_equal(a, complex_normals(1, "x", 0, 4, 3, lane=1))


def test_white_noise_moments():
    g = TorusGrid(8)
    c = sample_white_noise(g, 5, n_paths=100_000).coeffs
    for part in (c.real, c.imag):
        assert within(part.mean(0), part.std(0, ddof=1) / math.sqrt(len(c)), 0.0)
    e2 = np.abs(c) ** 2
    assert within(e2.mean(0), e2.std(0, ddof=1) / math.sqrt(len(c)), 1.0)


def test_white_noise_l2_expectation_is_twice_n():
    x = l2_sq(sample_white_noise(TorusGrid(16), 9, n_paths=100_000).coeffs)
    assert within(x.mean(), x.std(ddof=1) / math.sqrt(x.size), 32.0)


def test_white_noise_joint_chi_square_goodness_of_fit():
    n_modes, n = 8, 100_000
    c = sample_white_noise(TorusGrid(n_modes), 11, n_paths=n).coeffs
    bins = 20
    edges = stats.chi2(2).ppf(np.linspace(0, 1, bins + 1))
    statistic = 0.0
    for k in range(n_modes):
        counts, _ = np.histogram(2 * np.abs(c[:, k]) ** 2, edges)
        statistic += np.sum((counts - n / bins) ** 2 / (n / bins))
    assert stats.chi2(n_modes * (bins - 1)).sf(statistic) > 1e-3


# ---------------------------------------------------------------- smoothing operators


def test_power_zero_is_identity_and_power_one_is_inverse_wavenumber():
    g = TorusGrid(6)
    np.testing.assert_array_equal(phi_operator({"power": 0}, g).symbol, np.ones(6))
    np.testing.assert_allclose(phi_operator({"power": 1}, g).symbol, 1 / np.arange(1, 7))


def test_table_operator_and_errors():
    g = TorusGrid(3)
    np.testing.assert_array_equal(phi_operator({"table": [1, 2, 3]}, g).symbol, [1, 2, 3])
    for bad in ({"table": [1, 2]}, {"power": -1}, {"foo": 1}, {"power": 1, "table": [1, 2, 3]}, {"table": [1j, 1, 1]}):
        with pytest.raises(ValueError):
            phi_operator(bad, g)
    with pytest.raises(ValueError):
        phi_operator(MultiplierOp(np.ones(4), "phi"), g)


def hs_oracle(beta, s, n_max):
    return math.sqrt(sum((1 + n * n) ** s * abs(n) ** (-2 * beta) for n in range(-n_max, n_max + 1) if n))


@pytest.mark.parametrize("n_modes", [512, 1024])
def test_hs_norm_matches_direct_summation(n_modes):
    beta = 13 / 16 + 0.01
    value = hs_norm(phi_operator({"power": beta}, TorusGrid(n_modes)), 5 / 16)
    assert value == pytest.approx(hs_oracle(beta, 5 / 16, n_modes), rel=1e-12)


def test_hs_norm_change_under_doubling_matches_tail_estimate():
    beta, s = 13 / 16 + 0.01, 5 / 16
    a = hs_norm(phi_operator({"power": beta}, TorusGrid(512)), s)
    b = hs_norm(phi_operator({"power": beta}, TorusGrid(1024)), s)
    # the summand behaves like n^{-1.02}: the tail over (512, 1024] is ~ 2 (512^-0.02 - 1024^-0.02) / 0.02
    tail = 2 * (512**-0.02 - 1024**-0.02) / 0.02
    assert math.isfinite(b) and b > a
    assert b**2 - a**2 == pytest.approx(tail, rel=0.02)


@pytest.mark.xfail(strict=True, reason="partial sums of n^-1.02 still move by ~4% between 512 and 1024 modes")
def test_hs_norm_relative_change_under_one_percent_from_512_to_1024():
    beta, s = 13 / 16 + 0.01, 5 / 16
    a = hs_norm(phi_operator({"power": beta}, TorusGrid(512)), s)
    b = hs_norm(phi_operator({"power": beta}, TorusGrid(1024)), s)
    assert abs(b - a) / a < 0.01


def test_phi_symbol_forms():
    np.testing.assert_array_equal(phi_symbol(None, 3), np.zeros(3))
    np.testing.assert_array_equal(phi_symbol(2.0, 3), [2.0, 2.0, 2.0])
    with pytest.raises(ValueError):
        phi_symbol(np.ones(4), 3)


# ---------------------------------------------------------------- Brownian paths


def test_single_step_increment_variance():
    dt = 0.01
    inc = sample_brownian(4, [0.0, dt], 3, n_paths=100_000).increments[:, 0, :]
    for part in (inc.real, inc.imag):
        v = part**2
        assert within(v.mean(0), v.std(0, ddof=1) / math.sqrt(len(v)), dt)


def test_unit_time_modulus_square_is_two():
    path = sample_brownian(2, np.linspace(0, 1, 11), 4, n_paths=100_000)
    b1 = np.abs(path.values()[:, -1, :]) ** 2
    assert within(b1.mean(0), b1.std(0, ddof=1) / math.sqrt(len(b1)), 2.0)


def test_modes_are_uncorrelated():
    inc = sample_brownian(2, [0.0, 1.0], 8, n_paths=100_000).increments[:, 0, :]
    x, y = inc[:, 0].real, inc[:, 1].real
    r = np.corrcoef(x, y)[0, 1]
    assert abs(r) < 4 / math.sqrt(len(x))


def test_bridge_refinement_keeps_coarse_path_and_has_correct_law():
    times = np.linspace(0, 1, 5)
    coarse = sample_brownian(3, times, 1, n_paths=50_000)
    fine = coarse.refine()
    np.testing.assert_allclose(fine.values()[:, ::2, :], coarse.values(), atol=1e-12)
    np.testing.assert_allclose(fine.coarsen().increments, coarse.increments, atol=1e-12)
    half = fine.increments.real[:, 0, 0] ** 2
    assert within(half.mean(), half.std(ddof=1) / math.sqrt(half.size), 0.125)
    # the two halves of one step are independent Brownian increments
    left, right = fine.increments.real[:, 0, 0], fine.increments.real[:, 1, 0]
    assert abs(np.corrcoef(left, right)[0, 1]) < 4 / math.sqrt(left.size)


def test_brownian_grid_validation():
    with pytest.raises(ValueError):
        sample_brownian(2, [0.0, 0.0], 1)
    with pytest.raises(ValueError):
        sample_brownian(2, [0.0], 1)


# ---------------------------------------------------------------- stochastic convolution


def test_zero_operator_gives_zero_increment():
    u = SpectralField.zeros(TorusGrid(6), (10,))
    assert np.array_equal(stochastic_convolution_step(u, None, 0.1, 1).coeffs, np.zeros((10, 6)))


def test_increment_variance_formula():
    g = TorusGrid(4)
    inc = stochastic_convolution_step(SpectralField.zeros(g, (100_000,)), 1.0, 0.05, 2).coeffs
    e2 = np.abs(inc) ** 2
    expected = 1 - np.exp(-2 * np.arange(1, 5) ** 2 * 0.05)
    np.testing.assert_allclose(convolution_variance(4, 0.05), expected, rtol=1e-14)
    assert within(e2.mean(0), e2.std(0, ddof=1) / math.sqrt(len(e2)), expected)


def test_joint_law_with_brownian_increment_matches_ito_isometry():
    # E[xi conj(dB)] = 2 i n int_0^h e^{lambda (h - r)} dr, evaluated by quadrature
    h, n_modes = 0.02, 3
    xi, db = NoiseStream(5, h).base_increments(0, 200_000, n_modes)
    for n in range(1, n_modes + 1):
        lam = complex(-(n**2), n**3)
        re = quad(lambda r: (np.exp(lam * (h - r))).real, 0, h)
        im = quad(lambda r: (np.exp(lam * (h - r))).imag, 0, h)
        target = 2j * n * complex(re, im)
        prod = xi[:, n - 1] * np.conj(db[:, n - 1])
        se_re = prod.real.std(ddof=1) / math.sqrt(len(prod))
        se_im = prod.imag.std(ddof=1) / math.sqrt(len(prod))
        assert abs(prod.real.mean() - target.real) < 4 * se_re
        assert abs(prod.imag.mean() - target.imag) < 4 * se_im


@pytest.mark.slow
def test_long_step_first_mode_variance_against_fine_euler_oracle():
    dt = 5.0
    paths = 100_000
    inc = stochastic_convolution_step(SpectralField.zeros(TorusGrid(1), (paths,)), 1.0, dt, 3).coeffs[:, 0]
    e2 = np.abs(inc) ** 2
    closed = 1 - math.exp(-2 * dt)
    assert within(e2.mean(), e2.std(ddof=1) / math.sqrt(paths), closed)
    # explicit Euler-Maruyama on dX = (-1 + i) X dt + i dB, independent generator
    rng = np.random.default_rng(99)
    steps = 10_000
    h = dt / steps
    x = np.zeros(paths, complex)
    for _ in range(steps):
        g = rng.standard_normal((2, paths))
        x = x + h * complex(-1, 1) * x + 1j * math.sqrt(h) * (g[0] + 1j * g[1])
    o2 = np.abs(x) ** 2
    se = math.hypot(e2.std(ddof=1), o2.std(ddof=1)) / math.sqrt(paths)
    assert abs(o2.mean() - e2.mean()) < 4 * se
    assert abs(o2.mean() - closed) < 4 * o2.std(ddof=1) / math.sqrt(paths)


def test_coarse_steps_compose_base_increments_exactly():
    stream = NoiseStream(3, 0.01)
    xi4, db4 = stream.increments(1, 0.04, 5, 3)
    prop = np.exp(complex(0, 0) + (-(np.arange(1, 4) ** 2) + 1j * np.arange(1, 4) ** 3) * 0.01)
    acc, dbs = np.zeros((5, 3), complex), np.zeros((5, 3), complex)
    for j in range(4, 8):
        x, b = stream.base_increments(j, 5, 3)
        acc = prop * acc + x
        dbs += b
    np.testing.assert_allclose(xi4, acc, atol=1e-14)
    np.testing.assert_allclose(db4, dbs, atol=1e-14)
    with pytest.raises(ValueError):
        stream.increments(0, 0.015, 1, 3)


def test_convolution_path_refinement_is_a_bridge():
    path = ConvolutionPath.sample(4, 1.0, 0.1, 8, seed=2, n_paths=3)
    fine = path.refine()
    np.testing.assert_array_equal(fine.values[:, ::2], path.values)
    assert fine.dt == pytest.approx(0.05) and fine.n_steps == 16
    # restricting before refining gives the same fine samples
    np.testing.assert_array_equal(path.restrict(4).refine().values, fine.restrict(8).values)


def test_refined_convolution_path_has_the_stepped_law():
    dt = 0.02
    fine = ConvolutionPath.sample(3, 1.0, dt, 1, seed=8, n_paths=100_000).refine()
    mid = np.abs(fine.values[:, 1, :]) ** 2
    expected = convolution_variance(3, dt / 2)
    assert within(mid.mean(0), mid.std(0, ddof=1) / math.sqrt(len(mid)), expected)


def test_restrict_bounds():
    path = ConvolutionPath.sample(2, 1.0, 0.1, 4, seed=1)
    with pytest.raises(ValueError):
        path.restrict(5)
    with pytest.raises(ValueError):
        path.restrict(0)


def test_continuity_modulus_shrinks_with_lag():
    path = ConvolutionPath.sample(16, np.arange(1, 17) ** -0.83, 1 / 1024, 1024, seed=4)
    mod = continuity_modulus(path, -0.55)
    lags = sorted(mod)
    assert mod[lags[0]] < mod[lags[-1]]
    finer = continuity_modulus(path.refine().refine(), -0.55)
    assert min(finer) < min(mod) and finer[min(finer)] < mod[lags[0]]


def test_per_mode_variance_closed_form_against_euler_oracle():
    r = convolution_variance_check(np.arange(1, 9) ** -0.83, 8, T=0.1, paths=20_000, oracle_paths=1000,
                                   oracle_steps=5000, seed=3)
    assert within(r["exact_mean"], r["exact_se"], r["closed_form"])
    assert within(r["euler_mean"], r["euler_se"], r["closed_form"])


@pytest.mark.slow
def test_space_time_norm_of_convolution_grows_linearly_in_time():
    phi = np.arange(1, 17) ** -0.83
    g = convolution_norm_growth(phi, 16, -0.55, 0.4, (0.25, 0.5, 1.0, 2.0), paths=1000, seed=0)
    assert g["r2"] > 0.99
    assert g["slope"] > 0


def test_norm_growth_rejects_off_lattice_horizons():
    with pytest.raises(ValueError):
        convolution_norm_growth(1.0, 2, -0.55, 0.4, (0.3,), paths=2, dt=0.25)
