"""Bandwidths, mixtures, hybrid estimator, projections, grid quadrature."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from hybridpdf.cg_filter import FilterState
from hybridpdf.density import (Bandwidth, ConfigurationError, GaussianMixture, GridDensity, HybridMixture,
                               Projection, build_hybrid, direct_kde, eval_direct_kde, eval_hybrid,
                               eval_on_grid, gaussian_density, gaussian_l2_norm, marginal_hidden,
                               marginal_observed, project_mixture, scaling_bandwidth, silverman_bandwidth)


def random_spd(rng, n):
    X = rng.standard_normal((n, n))
    return X @ X.T + 0.3 * np.eye(n)


def small_hybrid(rng, L=5, n1=2, n2=2):
    centers = rng.standard_normal((L, n1))
    means = rng.standard_normal((L, n2))
    covs = np.stack([random_spd(rng, n2) * 0.3 for _ in range(L)])
    return HybridMixture(centers, Bandwidth(0.2, np.full(n1, 1.0) + rng.random(n1)), means, covs,
                         np.zeros(L, bool))


# bandwidth rules

def test_scaling_bandwidth_examples():
    assert scaling_bandwidth(500, 2).H == pytest.approx(500 ** (-1 / 3), rel=1e-14)
    assert scaling_bandwidth(500, 2).H == pytest.approx(0.12599, abs=1e-5)
    assert scaling_bandwidth(2, 0).H == pytest.approx(2 ** -0.5, rel=1e-14)
    # 500^(-2/7) = 0.169381 (a commonly quoted 0.1696 is a rounding slip)
    assert scaling_bandwidth(500, 3).H == pytest.approx(500 ** (-2 / 7), rel=1e-14)
    assert scaling_bandwidth(500, 3).H == pytest.approx(0.16938, abs=1e-5)
    assert scaling_bandwidth(500, 2, kappa=0.25).H == pytest.approx(0.25 * 500 ** (-1 / 3))
    with pytest.raises(ConfigurationError):
        scaling_bandwidth(1, 2)


def test_silverman_classic_1d():
    x = np.random.default_rng(0).standard_normal(4000)
    bw = silverman_bandwidth(x)
    textbook = (4 / 3) ** 0.2 * x.std(ddof=1) * 4000 ** -0.2
    assert np.sqrt(bw.variances[0]) == pytest.approx(textbook, rel=1e-12)


def test_silverman_scale_equivariant():
    x = np.random.default_rng(1).standard_normal((300, 2))
    a, b = silverman_bandwidth(x), silverman_bandwidth(10 * x)
    assert a.H == b.H
    np.testing.assert_allclose(b.c, 10 * a.c)


def test_silverman_zero_variance():
    with pytest.raises(ConfigurationError):
        silverman_bandwidth(np.ones((2, 1)))


@pytest.mark.parametrize("H,c", [(0.0, [1.0]), (1.0, [0.0]), (-1.0, [1.0]), (1.0, [np.nan])])
def test_bandwidth_invariants(H, c):
    with pytest.raises(ConfigurationError):
        Bandwidth(H, c)


# evaluation

def test_hybrid_peak_value():
    mix = HybridMixture([[0.0]], Bandwidth(1.0, [1.0]), [[0.0]], np.ones((1, 1, 1)), np.zeros(1, bool))
    assert eval_hybrid(mix, [[0.0, 0.0]])[0] == pytest.approx(1 / (2 * np.pi), rel=1e-14)


def test_far_point_underflows_to_zero():
    mix = HybridMixture([[0.0]], Bandwidth(1.0, [1.0]), [[0.0]], np.ones((1, 1, 1)), np.zeros(1, bool))
    v = eval_hybrid(mix, [[50.0, 50.0], [0.0, 1e4]])
    assert np.all(v == 0.0) and np.all(np.isfinite(v))


def test_symmetric_midpoint():
    mix = HybridMixture([[-1.0], [1.0]], Bandwidth(0.5, [1.0]), [[0.0], [0.0]], np.ones((2, 1, 1)),
                        np.zeros(2, bool))
    one = HybridMixture([[-1.0]], Bandwidth(0.5, [1.0]), [[0.0]], np.ones((1, 1, 1)), np.zeros(1, bool))
    assert eval_hybrid(mix, [[0.0, 0.3]])[0] == pytest.approx(eval_hybrid(one, [[0.0, 0.3]])[0], rel=1e-14)


def test_direct_kde_peak_3d():
    assert eval_direct_kde([[1.0, 2.0, 3.0]], Bandwidth(1.0, np.ones(3)), [[1.0, 2.0, 3.0]])[0] == \
        pytest.approx((2 * np.pi) ** -1.5, rel=1e-14)


def test_hybrid_equals_direct_with_matching_hidden_covariance():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((30, 3))
    bw = Bandwidth(0.3, [1.0, 0.7, 1.4])
    covs = np.full((30, 1, 1), bw.variances[2])
    mix = build_hybrid(X[:, :2], FilterState(X[:, 2:], covs), bw.restrict([0, 1]))
    pts = rng.standard_normal((100, 3))
    np.testing.assert_allclose(eval_hybrid(mix, pts), eval_direct_kde(X, bw, pts), rtol=1e-12, atol=0)


def test_kde_standard_normal_at_zero():
    x = np.random.default_rng(3).standard_normal((10000, 1))
    val = eval_direct_kde(x, silverman_bandwidth(x), [[0.0]])[0]
    assert abs(val - 1 / np.sqrt(2 * np.pi)) < 0.02


def test_build_hybrid_regularizes_degenerate():
    bw = Bandwidth(0.1, [1.0, 1.0])
    mix = build_hybrid(np.zeros((4, 2)), FilterState(np.zeros((4, 1)), np.zeros((4, 1, 1))), bw, delta=1e-6)
    assert np.all(mix.degenerate)
    np.testing.assert_array_equal(mix.hidden_covs[:, 0, 0], 1e-6)
    with pytest.raises(ConfigurationError):
        build_hybrid(np.zeros((3, 2)), FilterState(np.zeros((4, 1)), np.zeros((4, 1, 1))), bw)


def test_single_component_block_covariance():
    bw = Bandwidth(0.1, [1.0, 2.0])
    R = np.array([[[0.5]]])
    gm = build_hybrid([[0.0, 1.0]], FilterState([[3.0]], R), bw).as_gaussian_mixture()
    np.testing.assert_allclose(gm.covs[0], np.diag([0.1, 0.4, 0.5]))
    np.testing.assert_allclose(gm.weights, [1.0])


def test_grid_path_matches_pointwise():
    rng = np.random.default_rng(4)
    gm = small_hybrid(rng).as_gaussian_mixture()
    axes = [np.linspace(-3, 3, 7), np.linspace(-2, 2, 5), np.linspace(-4, 4, 6), np.linspace(-1, 1, 4)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=1)
    np.testing.assert_allclose(gm.eval_grid(axes).ravel(), gm.eval(pts), rtol=1e-12, atol=1e-300)


# marginals and projections

def test_marginal_hidden_normalized():
    rng = np.random.default_rng(5)
    mix = small_hybrid(rng, n2=1)
    g = eval_on_grid(marginal_hidden(mix), [np.linspace(-12, 12, 2001)])
    assert g.mass == pytest.approx(1.0, abs=1e-3)


def test_marginal_observed_single_component():
    mix = HybridMixture([[1.0, 2.0]], Bandwidth(0.5, [1.0, 2.0]), [[0.0]], np.ones((1, 1, 1)),
                        np.zeros(1, bool))
    mo = marginal_observed(mix)
    np.testing.assert_allclose(mo.covs[0], np.diag([0.5, 2.0]))
    np.testing.assert_allclose(mo.means[0], [1.0, 2.0])


def test_projection_identity_and_selection():
    rng = np.random.default_rng(6)
    mix = small_hybrid(rng)
    same = project_mixture(mix, np.eye(2))
    pts = rng.standard_normal((20, 4))
    np.testing.assert_allclose(eval_hybrid(same, pts), eval_hybrid(mix, pts), rtol=1e-13)
    first = project_mixture(mix, Projection.select(2, 0))
    np.testing.assert_allclose(first.hidden_covs[:, 0, 0], mix.hidden_covs[:, 0, 0])
    with pytest.raises(ConfigurationError):
        Projection([[1.0, 2.0], [2.0, 4.0]])


def test_projection_equals_numerical_marginal():
    rng = np.random.default_rng(7)
    mix = small_hybrid(rng, L=3, n1=1, n2=2)
    proj = project_mixture(mix, Projection.select(2, 0))
    for x, y in [(0.1, -0.3), (0.5, 0.9), (-1.0, 0.0)]:
        num, _ = integrate.quad(lambda z: eval_hybrid(mix, [[x, y, z]])[0], -np.inf, np.inf,
                                epsabs=1e-12, epsrel=1e-10)
        assert eval_hybrid(proj, [[x, y]])[0] == pytest.approx(num, abs=1e-6)


# Gaussian L2 norm and grids

def test_gaussian_l2_norm_closed_forms():
    # int p^2 = det(4 pi cov)^(-1/2)
    assert gaussian_l2_norm([[1.0]]) == pytest.approx(1 / np.sqrt(4 * np.pi), rel=1e-14)
    assert gaussian_l2_norm([[1 / (4 * np.pi)]]) == pytest.approx(1.0, rel=1e-14)
    assert gaussian_l2_norm(np.diag([1.0, 4.0])) == pytest.approx(1 / (8 * np.pi), rel=1e-14)


def test_gaussian_l2_norm_quadrature_2d():
    cov = np.diag([1.0, 4.0])
    g = eval_on_grid(gaussian_density(np.zeros(2), cov), [np.linspace(-8, 8, 801), np.linspace(-16, 16, 801)])
    assert g.integrate(g.values**2) == pytest.approx(gaussian_l2_norm(cov), abs=1e-6)


def test_gaussian_l2_norm_rejects_singular():
    with pytest.raises(ConfigurationError):
        gaussian_l2_norm(np.diag([1.0, 0.0]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 3), s=st.floats(0.1, 10))
def test_gaussian_l2_norm_scaling(seed, n, s):
    cov = random_spd(np.random.default_rng(seed), n)
    assert gaussian_l2_norm(s * cov) == pytest.approx(s ** (-n / 2) * gaussian_l2_norm(cov), rel=1e-10)


def test_grid_constant_and_normal_mass():
    g = eval_on_grid(lambda p: np.ones(len(p)), [np.linspace(0, 2, 5), np.linspace(-1, 2, 7)])
    assert g.mass == pytest.approx(6.0, rel=1e-14)
    n = eval_on_grid(gaussian_density([0.0], [[1.0]]), [np.linspace(-8, 8, 1601)])
    assert n.mass == pytest.approx(1.0, abs=1e-6)


def test_hybrid_mass_on_box():
    rng = np.random.default_rng(8)
    mix = small_hybrid(rng, L=4, n1=1, n2=1)
    gm = mix.as_gaussian_mixture()
    sd = np.sqrt(np.max(np.diagonal(gm.covs, axis1=1, axis2=2), axis=0))
    axes = [np.linspace(gm.means[:, k].min() - 8 * sd[k], gm.means[:, k].max() + 8 * sd[k], 801)
            for k in range(2)]
    assert eval_on_grid(mix, axes).mass == pytest.approx(1.0, abs=1e-4)


def test_grid_density_validation():
    with pytest.raises(ConfigurationError):
        GridDensity((np.array([0.0, 0.0, 1.0]),), np.zeros(3))
    a = GridDensity((np.linspace(0, 1, 3),), np.zeros(3))
    b = GridDensity((np.linspace(0, 1, 4),), np.zeros(4))
    with pytest.raises(ConfigurationError):
        a.l2_distance_sq(b)


def test_mixture_rejects_singular_covariance():
    gm = GaussianMixture(np.zeros((1, 2)), np.zeros((1, 2, 2)))
    with pytest.raises(ConfigurationError):
        gm.eval([[0.0, 0.0]])


# properties

@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_nonnegative_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    mix = small_hybrid(rng, L=6)
    pts = rng.standard_normal((40, 4)) * 4
    v = eval_hybrid(mix, pts)
    assert np.all(v >= 0)
    p = rng.permutation(6)
    shuffled = HybridMixture(mix.centers[p], mix.bandwidth, mix.hidden_means[p], mix.hidden_covs[p],
                             mix.degenerate[p])
    np.testing.assert_allclose(eval_hybrid(shuffled, pts), v, rtol=1e-12, atol=1e-300)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_marginal_consistency(seed):
    rng = np.random.default_rng(seed)
    mix = small_hybrid(rng, L=3, n1=1, n2=1)
    gm = mix.as_gaussian_mixture()
    lo = gm.means.min(axis=0) - 9 * np.sqrt(gm.covs.max(axis=0).diagonal())
    hi = gm.means.max(axis=0) + 9 * np.sqrt(gm.covs.max(axis=0).diagonal())
    axes = [np.linspace(lo[k], hi[k], 1201) for k in range(2)]
    joint = eval_on_grid(mix, axes)
    obs = eval_on_grid(marginal_observed(mix), axes[:1]).values
    hid = eval_on_grid(marginal_hidden(mix), axes[1:]).values
    np.testing.assert_allclose(joint.marginal([0]).values, obs, atol=1e-6)
    np.testing.assert_allclose(joint.marginal([1]).values, hid, atol=1e-6)


def test_direct_kde_dimension_check():
    with pytest.raises(ConfigurationError):
        direct_kde(np.zeros((3, 2)), Bandwidth(1.0, [1.0]))
