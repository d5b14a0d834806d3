import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from binflow.poisson import (
    OracleDenoiser,
    PosteriorSupportError,
    binomial_thin,
    bridge_pmf,
    flow_marginal,
    h_eval,
    intensity,
    oracle_denoiser,
    oracle_denoiser_table,
    poisson_pmf,
    poisson_log_pmf,
    relative_density,
    semigroup_apply,
)
from binflow.targets import custom_target, make_target, moments


def poisson_table(rate, cap):
    return custom_target(np.exp(poisson_log_pmf(rate, np.arange(cap + 1))))


def test_poisson_pmf_values():
    assert poisson_pmf(1.0, 0) == pytest.approx(np.exp(-1.0), rel=1e-14)
    assert poisson_pmf(0.0, 0) == 1.0
    assert poisson_pmf(0.0, 3) == 0.0
    total = sum(poisson_pmf(5.0, k) for k in range(61))
    assert abs(total - 1.0) < 1e-12


def test_semigroup_constant_and_linear():
    G = np.ones(200)
    assert semigroup_apply(G, 0.7, 3) == pytest.approx(1.0, abs=1e-12)
    G = np.arange(200, dtype=float)
    assert semigroup_apply(G, 0.3, 2) == pytest.approx(2.3, abs=1e-10)


def test_semigroup_matches_log_space_h():
    # brute-force sums against the log-space evaluation, and both against
    # the closed form for an (effectively untruncated) Poisson target
    theta = 3.0
    pmf = make_target("poisson", {"rate": theta}, 40)
    tab = relative_density(pmf, 1.0)
    f = tab.f()
    for t in (0.0, 0.25, 0.6, 1.0):
        for x in (0, 1, 5, 10):
            brute = semigroup_apply(f, 1.0 - t, x)
            assert h_eval(tab, t, x) == pytest.approx(brute, rel=1e-10)
            closed = np.exp((1.0 - theta) * t) * theta**x
            assert brute == pytest.approx(closed, rel=1e-8)


def test_relative_density_poisson_closed_form():
    pmf = make_target("poisson", {"rate": 5.0}, 40)
    tab = relative_density(pmf, 1.0)
    xs = np.arange(20)
    assert np.allclose(tab.f()[xs], np.exp(1.0 - 5.0) * 5.0**xs, rtol=1e-10)


def test_relative_density_self_reference_constant():
    pmf = poisson_table(1.0, 30)
    tab = relative_density(pmf, 1.0)
    f = tab.f()
    assert np.max(np.abs(f - f[0])) < 1e-10 * f[0]
    recon = float(np.sum(f * np.exp(poisson_log_pmf(1.0, np.arange(31)))))
    assert recon == pytest.approx(1.0, abs=1e-10)


def test_relative_density_floors_zeros_with_warning():
    pmf = make_target("zipf")
    with pytest.warns(RuntimeWarning):
        tab = relative_density(pmf, 1.0)
    assert tab.floored_states == 1
    assert np.isfinite(tab.log_f).all()


def test_h_boundary_values(tables):
    for family, tab in tables.items():
        n = tab.support_cap
        assert np.allclose(np.exp(tab.log_h_vec(1.0)[: n + 1]), tab.f(), rtol=1e-12), family
        assert h_eval(tab, 0.0, 0) == pytest.approx(1.0, abs=1e-10), family
        assert h_eval(tab, 0.5, n + 1) == 0.0, family


def test_h_eval_time_range():
    tab = relative_density(make_target("poisson"), 1.0)
    with pytest.raises(ValueError):
        h_eval(tab, 1.5, 0)
    with pytest.raises(ValueError):
        h_eval(tab, -0.1, 0)


def test_intensity_constant_for_poisson_target():
    tab = relative_density(make_target("poisson", {"rate": 3.0}, 40), 1.0)
    for t in (0.0, 0.4, 0.9):
        lam = intensity(tab, t, np.arange(20))
        assert np.allclose(lam, 3.0, atol=1e-8)


def test_intensity_one_for_reference_target():
    tab = relative_density(poisson_table(1.0, 40), 1.0)
    lam = intensity(tab, 0.5, np.arange(15))
    assert np.allclose(lam, 1.0, atol=1e-9)


def test_intensity_absorbing_at_cap():
    tab = relative_density(make_target("poisson"), 1.0)
    assert intensity(tab, 0.5, np.array([40]))[0] == 0.0
    with pytest.raises(ValueError):
        intensity(tab, 1.0, np.array([0]))


def test_oracle_denoiser_endpoints():
    pmf = make_target("poisson", {"rate": 5.0}, 40)
    assert oracle_denoiser(pmf, 1.0, 1.0, 7) == 7.0
    prior_mean = moments(pmf)[0]
    assert oracle_denoiser(pmf, 1.0, 0.0, 0) == pytest.approx(prior_mean, abs=1e-9)
    with pytest.raises(PosteriorSupportError):
        oracle_denoiser(pmf, 1.0, 0.0, 3)


def test_oracle_denoiser_constant_rate_value():
    pmf = make_target("poisson", {"rate": 5.0}, 40)
    assert oracle_denoiser(pmf, 1.0, 0.5, 2) == pytest.approx(4.5, abs=1e-8)


def test_oracle_denoiser_empty_posterior():
    delta0 = custom_target([1.0, 0.0, 0.0])
    with pytest.raises(PosteriorSupportError):
        oracle_denoiser(delta0, 1.0, 0.5, 2)


def test_oracle_denoiser_monotone_bound(targets):
    for family, pmf in targets.items():
        for t in (0.1, 0.5, 0.9):
            table = oracle_denoiser_table(pmf, 1.0, t)
            xs = np.arange(pmf.support_cap + 1)
            assert np.all(table >= xs - 1e-9), (family, t)


def test_oracle_denoiser_table_matches_scalar():
    pmf = make_target("zip")
    table = oracle_denoiser_table(pmf, 1.0, 0.37)
    for x in (0, 1, 5, 17):
        assert table[x] == pytest.approx(oracle_denoiser(pmf, 1.0, 0.37, x), rel=1e-12)


def test_tweedie_relation_zip_origin():
    # posterior-mean route vs semigroup-ratio route at (t, x) = (0.5, 0)
    pmf = make_target("zip")
    tab = relative_density(pmf, 1.0)
    m = oracle_denoiser(pmf, 1.0, 0.5, 0)
    lam = intensity(tab, 0.5, np.array([0]))[0]
    assert abs(m - 0 - 0.5 * lam) < 1e-8


def test_flow_marginal_endpoints(tables, targets):
    for family, tab in tables.items():
        p0 = flow_marginal(tab, 0.0)
        assert p0[0] == pytest.approx(1.0, abs=1e-12)
        assert np.all(p0[1:] == 0.0)
        p1 = flow_marginal(tab, 1.0)
        assert np.max(np.abs(p1 - targets[family].probs)) < 1e-10


def test_flow_marginal_matches_binomial_mixture():
    pmf = make_target("poisson", {"rate": 5.0}, 40)
    tab = relative_density(pmf, 1.0)
    for t in (0.2, 0.5, 0.8):
        direct = flow_marginal(tab, t)
        mixture = np.zeros(41)
        for y in range(41):
            mixture[: y + 1] += pmf.probs[y] * bridge_pmf(y, t, 1.0)
        assert np.abs(direct - mixture).sum() < 1e-12
        assert direct.sum() == pytest.approx(1.0, abs=1e-10)


def test_binomial_thin_edges_and_mean(rng):
    x = np.array([3, 7, 0])
    assert np.array_equal(binomial_thin(x, 1.0, rng), x)
    assert np.array_equal(binomial_thin(x, 0.0, rng), np.zeros(3, dtype=int))
    draws = binomial_thin(np.full(1_000_000, 20), 0.3, np.random.default_rng(5))
    assert abs(draws.mean() - 6.0) < 0.01
    with pytest.raises(ValueError):
        binomial_thin(x, 1.5, rng)


def test_bridge_pmf_values():
    assert np.array_equal(bridge_pmf(4, 0.0, 1.0), [1, 0, 0, 0, 0])
    assert np.array_equal(bridge_pmf(4, 1.0, 1.0), [0, 0, 0, 0, 1])
    assert np.allclose(bridge_pmf(4, 0.5, 1.0), np.array([1, 4, 6, 4, 1]) / 16.0, rtol=1e-12)
    assert bridge_pmf(7, 0.3, 1.0).sum() == pytest.approx(1.0, abs=1e-15)


@given(st.integers(0, 60), st.floats(0.01, 0.99))
@settings(max_examples=40, deadline=None)
def test_bridge_pmf_normalized(x_T, alpha):
    p = bridge_pmf(x_T, alpha, 1.0)
    assert p.size == x_T + 1
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_summation_by_parts_exact_1d(seed):
    # sum_x G(x) dH(x) = -sum_x H(x) dG(x - 1) for finitely supported G, H
    rng = np.random.default_rng(seed)
    width = 30
    G = np.zeros(width + 4)
    H = np.zeros(width + 4)
    G[2:width + 2] = rng.normal(size=width)
    H[2:width + 2] = rng.normal(size=width)
    dH = H[1:] - H[:-1]                      # dH[x] = H(x+1) - H(x)
    dG_shift = G[1:] - G[:-1]                # dG(x-1) aligned at index x
    lhs = float(np.dot(G[:-1], dH))
    rhs = -float(np.dot(H[1:], dG_shift))
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_summation_by_parts_exact_2d(rng):
    shape = (12, 12)
    G = np.zeros((16, 16))
    H = np.zeros((16, 16))
    G[2:14, 2:14] = rng.normal(size=shape)
    H[2:14, 2:14] = rng.normal(size=shape)
    for axis in (0, 1):
        dH = np.diff(H, axis=axis)
        dG = np.diff(G, axis=axis)
        if axis == 0:
            lhs = float(np.sum(G[:-1, :] * dH))
            rhs = -float(np.sum(H[1:, :] * dG))
        else:
            lhs = float(np.sum(G[:, :-1] * dH))
            rhs = -float(np.sum(H[:, 1:] * dG))
        assert lhs == pytest.approx(rhs, abs=1e-12)


def test_semigroup_heat_equation_second_order(rng):
    # d/dt P_t G = P_t G(x+1) - P_t G(x), central differences halve as dt^2
    G = rng.normal(size=50) ** 2
    t = 0.6
    x = 4
    residuals = []
    for dt in (1e-3, 5e-4):
        lhs = (semigroup_apply(G, t + dt, x) - semigroup_apply(G, t - dt, x)) / (2 * dt)
        rhs = semigroup_apply(G, t, x + 1) - semigroup_apply(G, t, x)
        residuals.append(abs(lhs - rhs))
    order = np.log2(residuals[0] / residuals[1])
    assert order > 1.9


def test_oracle_denoiser_class_matches_identity():
    pmf = make_target("poisson", {"rate": 3.0}, 40)
    tab = relative_density(pmf, 1.0)
    den = OracleDenoiser(tab)
    xs = np.arange(10)
    m = den(0.4, xs)
    assert np.allclose(m, xs + 0.6 * 3.0, atol=1e-8)
    assert np.array_equal(den(1.0, xs), xs.astype(float))
    stacked = den(0.4, xs.reshape(5, 2))     # coordinatewise on (n, d)
    assert stacked.shape == (5, 2)
    assert np.allclose(stacked, xs.reshape(5, 2) + 0.6 * 3.0, atol=1e-8)
