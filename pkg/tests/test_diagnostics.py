"""MISE machinery, bounds, Gramians and covariance bounds."""
from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridpdf.density import (Bandwidth, ConfigurationError, GridDensity, direct_kde, eval_on_grid,
                               gaussian_density, gaussian_l2_norm)
from hybridpdf.diagnostics import (bias_bound_report, controllability_gramian, derive_seed,
                                   direct_variance_bound, estimate_mise, fit_slope, g_value, h_value,
                                   marginal_hidden_mise_bound, matrix_flow, mc_reference,
                                   mise_from_estimates, r2_lower_bound, r2_upper_bound,
                                   variance_bound, variance_bound_ratio)
from hybridpdf.model import energy_model_constants, ou_model, triad_energy_model, triad_model, triad_params


def grid1d(lo=-20.0, hi=20.0, n=8001):
    return [np.linspace(lo, hi, n)]


# MISE

def test_mise_trivial():
    ref = eval_on_grid(gaussian_density([0.0], [[1.0]]), grid1d())
    rep = estimate_mise(lambda s: ref, ref, 3)
    assert rep.mise == 0.0 and rep.bias == 0.0 and rep.variance == 0.0


@pytest.mark.parametrize("delta", [0.5, 2.0, 30.0])
def test_mise_two_gaussians_closed_form(delta):
    axes = grid1d(-20, 20 + delta, 12001)
    ref = eval_on_grid(gaussian_density([0.0], [[1.0]]), axes)
    est = eval_on_grid(gaussian_density([delta], [[1.0]]), axes)
    rep = mise_from_estimates([est, est], ref)
    exact = 2 * (1 - math.exp(-delta**2 / 4)) / math.sqrt(4 * math.pi)
    assert rep.mise == pytest.approx(exact, abs=1e-8)
    assert rep.variance == 0.0
    if delta == 30.0:
        # far apart: twice the squared norm of one Gaussian
        assert rep.mise == pytest.approx(2 * gaussian_l2_norm([[1.0]]), rel=1e-6)
        assert rep.mise == pytest.approx(0.5642, abs=1e-4)


def test_mise_decomposition_identity():
    rng = np.random.default_rng(0)
    axes = [np.linspace(-5, 5, 60), np.linspace(-6, 6, 50)]
    ref = eval_on_grid(gaussian_density(np.zeros(2), np.diag([1.0, 2.0])), axes)

    def factory(seed):
        x = np.random.default_rng(seed).standard_normal((200, 2)) * [1.0, np.sqrt(2)]
        return direct_kde(x, Bandwidth(0.2, [1.0, 1.4]))

    rep = estimate_mise(factory, ref, 10, base_seed=4)
    assert rep.decomposition_residual <= 1e-12
    assert rep.variance_unbiased == pytest.approx(rep.variance * 10 / 9)
    assert len(set(rep.seeds)) == 10
    with pytest.raises(ConfigurationError):
        estimate_mise(factory, ref, 1)
    del rng


def test_mise_grid_mismatch():
    a = GridDensity((np.linspace(0, 1, 5),), np.ones(5))
    b = GridDensity((np.linspace(0, 1, 6),), np.ones(6))
    with pytest.raises(ConfigurationError):
        mise_from_estimates([a, a], b)


# variance bounds

def test_variance_bound_example():
    bw = Bandwidth(0.1, [1.0, 1.0])
    val = variance_bound(np.ones((1, 1, 1)), bw, 100)
    assert val == pytest.approx((math.pi * 0.1 * math.pi * 0.1 * math.pi) ** -0.5 / 100, rel=1e-14)
    assert val == pytest.approx(0.01796, abs=1e-5)


def test_variance_bound_scaling_by_four():
    bw = Bandwidth(0.1, [1.0, 2.0])
    R = np.random.default_rng(1).uniform(0.1, 2, (20, 1, 1))
    assert variance_bound(4 * R, bw, 50) == pytest.approx(0.5 * variance_bound(R, bw, 50), rel=1e-13)


def test_variance_bound_rejects_singular():
    with pytest.raises(ConfigurationError):
        variance_bound(np.zeros((2, 1, 1)), Bandwidth(0.1, [1.0]), 10)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n2=st.integers(1, 3), H=st.floats(0.01, 2.0))
def test_variance_bound_ratio_identity(seed, n2, H):
    rng = np.random.default_rng(seed)
    n1 = 2
    X = rng.standard_normal((7, n2, n2))
    R = X @ np.swapaxes(X, 1, 2) + 0.2 * np.eye(n2)
    bw = Bandwidth(H, rng.uniform(0.3, 3.0, n1 + n2))
    L = 37
    ratio = direct_variance_bound(bw, L) / variance_bound(R, bw.restrict(range(n1)), L)
    assert variance_bound_ratio(R, bw, n1) == pytest.approx(ratio, rel=1e-12)


def test_hidden_mise_bound_formula():
    R = np.array([[[0.5]], [[2.0]]])
    expect = np.mean([(math.pi * 0.5) ** -0.5, (math.pi * 2.0) ** -0.5]) / 10
    assert marginal_hidden_mise_bound(R, 10) == pytest.approx(expect, rel=1e-14)


# bias bound

def test_bias_bound_constant_density():
    axes = (np.linspace(0, 1, 9), np.linspace(0, 2, 9))
    g = GridDensity(axes, np.full((9, 9), 0.5))
    assert bias_bound_report(g, Bandwidth(0.3, [1.0, 1.0])) == 0.0


def test_bias_bound_quadratic_in_H():
    g = eval_on_grid(gaussian_density(np.zeros(2), np.eye(2)), [np.linspace(-6, 6, 121)] * 2)
    a = bias_bound_report(g, Bandwidth(0.1, [1.0, 1.0]))
    b = bias_bound_report(g, Bandwidth(0.2, [1.0, 1.0]))
    assert b == pytest.approx(4 * a, rel=1e-12)


def test_bias_bound_1d_closed_form():
    # J(p'') for N(0,1) is 3 / (8 sqrt(pi))
    g = eval_on_grid(gaussian_density([0.0], [[1.0]]), [np.linspace(-10, 10, 4001)])
    H = 0.05
    assert bias_bound_report(g, Bandwidth(H, [1.0]), delta=0.1) == pytest.approx(
        1.1 / 4 * H**2 * 3 / (8 * math.sqrt(math.pi)), rel=1e-4)


def test_bias_bound_coarse_grid():
    g = GridDensity((np.linspace(0, 1, 4),), np.ones(4))
    with pytest.raises(ConfigurationError):
        bias_bound_report(g, Bandwidth(0.1, [1.0]))


def test_empirical_bias_below_bound():
    axes = [np.linspace(-4, 4, 81), np.linspace(-6, 6, 81)]
    cov = np.diag([0.5, 1.0])
    ref = eval_on_grid(gaussian_density(np.zeros(2), cov), axes)
    bw = Bandwidth(0.05, np.sqrt([0.5, 1.0]))
    n = 20

    def factory(seed):
        x = np.random.default_rng(seed).multivariate_normal(np.zeros(2), cov, 2000)
        return direct_kde(x, bw)

    rep = estimate_mise(factory, ref, n, base_seed=11)
    # E[bias_hat] = bias + variance / n
    bias = rep.bias - rep.variance_unbiased / n
    se = 3 * rep.variance_stderr * n / (n - 1) / n
    assert bias <= 1.25 * bias_bound_report(ref, bw) + se


# scaling helpers

def test_fit_slope_exact():
    Ls = [100, 200, 400, 800]
    assert fit_slope(Ls, [3.0 * L ** -0.7 for L in Ls]) == pytest.approx(-0.7, rel=1e-12)
    with pytest.raises(ConfigurationError):
        fit_slope([10, 10], [1.0, 2.0])


def test_derive_seed_deterministic():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 2, 4)
    assert 0 <= derive_seed(7) < 2**63


def test_mc_reference_accuracy():
    x = np.random.default_rng(3).standard_normal((200000, 1))
    axes = [np.linspace(-5, 5, 101)]
    ref = mc_reference(x, axes)
    truth = eval_on_grid(gaussian_density([0.0], [[1.0]]), axes)
    assert ref.l2_distance_sq(truth) < 1e-4
    assert ref.mass == pytest.approx(1.0, abs=1e-3)
    with pytest.raises(ConfigurationError):
        mc_reference(x, [np.array([0.0, 1.0, 3.0])])


# Gramians

def test_gramian_scalar_closed_form():
    m = ou_model(d=1.0, sigma=1.0)
    path = np.zeros((2001, 1))
    rep = controllability_gramian(m, path, 1.0, 2.0, 1e-3)
    assert rep.C[0, 0] == pytest.approx((1 - math.exp(-2)) / 2, abs=1e-6)
    assert rep.C[0, 0] == pytest.approx(0.43233, abs=1e-5)


def test_gramian_zero_noise():
    m = ou_model(d=1.0, sigma=0.0)
    rep = controllability_gramian(m, np.zeros((1001, 1)), 0.0, 1.0, 1e-3)
    assert np.all(rep.C == 0.0)


def test_gramian_trajectory_gap():
    with pytest.raises(ConfigurationError, match="gap"):
        controllability_gramian(ou_model(), np.zeros((100, 1)), 0.0, 1.0, 1e-3)


def test_flow_identity_and_cocycle():
    m = triad_model(triad_params("I", "triad_damped"))
    path = np.random.default_rng(2).standard_normal((3001, 2))
    dt = 1e-3
    _, Phi = matrix_flow(m, path, 0.0, 3.0, dt)
    np.testing.assert_allclose(Phi[0], np.eye(1))
    E = lambda j, k: Phi[k] @ np.linalg.inv(Phi[j])  # noqa: E731
    np.testing.assert_allclose(E(1000, 3000) @ E(0, 1000), E(0, 3000), rtol=1e-12)
    assert Phi[-1][0, 0] == pytest.approx(math.exp(-0.1 * 3.0), rel=1e-12)


def test_observability_gramian_scalar():
    # a1 = -1, A1 = 1, Sigma_I = 1: E_{r,1}^{-1} = e^{1-r}, O = int_0^1 e^{2(1-r)} dr
    m = ou_model(d=1.0, sigma=1.0, coupling=1.0)
    rep = controllability_gramian(m, np.zeros((1001, 1)), 0.0, 1.0, 1e-3)
    assert rep.O[0, 0] == pytest.approx((math.exp(2) - 1) / 2, rel=1e-6)


# covariance bounds

def test_h_value_zero_path():
    v, Dc, sm, sp = 1.0, 3.0, 0.2, 0.5
    h = h_value(np.zeros((1001, 2)), 1.0, 1e-3, v, 1.0, Dc, sm, sp)
    assert h == pytest.approx(v**2 * sp**2 * sm**-2 * Dc**6 * v + Dc * sm**-2 / v, rel=1e-14)


def test_bounds_vacuous_without_hidden_noise():
    em = triad_energy_model(triad_params("I", "triad"))
    c = energy_model_constants(em)
    assert not c["applicable"]
    lo = r2_lower_bound(np.zeros((2001, 2)), 2.0, 1e-3, 1.0, 1.0, c["Dc"], c["sigma_II_minus"],
                        c["sigma_II_plus"], R=np.zeros((1, 1)))
    assert not lo.applicable and lo.holds is None
    assert any("N_II = 1" in n for n in lo.notes)


def test_g_infinite_without_observability():
    assert g_value(np.zeros((1001, 1)), 1.0, 1e-3, 1.0, 1.0, 2.0, 1.0, np.zeros(1001)) == math.inf
    m = ou_model(coupling=0.0)
    up = r2_upper_bound(m, np.zeros((1001, 1)), 1.0, 1e-3, 1.0, 1.0, 2.0, 1.0, R=np.eye(1))
    assert not up.applicable


def test_scalar_stationary_below_g():
    m = ou_model(d=1.0, sigma=1.0, coupling=1.0, d_obs=1.0)
    c = energy_model_constants(m.quadratic)
    assert c["applicable"]
    R_star = math.sqrt(2) - 1
    up = r2_upper_bound(m, np.zeros((2001, 1)), 2.0, 1e-3, 1.0, 1.0, c["Dc"], c["sigma_II_plus"],
                        R=np.array([[R_star]]))
    assert up.applicable and up.holds
    assert up.value >= R_star


def test_lower_bound_requires_t_ge_v():
    with pytest.raises(ConfigurationError):
        r2_lower_bound(np.zeros((1001, 1)), 0.5, 1e-3, 1.0, 1.0, 2.0, 1.0, 1.0)
