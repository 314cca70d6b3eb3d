"""Euler-Maruyama ensemble simulation."""
from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridpdf import _backend
from hybridpdf.model import ou_model, triad_model, triad_params
from hybridpdf.sde_sim import (BlowUpError, Ensemble, RngPolicy, ensemble_moments, simulate,
                               step_euler_maruyama)


def zero_model():
    return ou_model(d=0.0, sigma=0.0, d_obs=0.0, sigma_obs=0.0, coupling=0.0)


def test_zero_dynamics_constant(backend):
    m = zero_model()
    init = Ensemble.at_point(m, 1, [0.3, -2.0])
    store, final = simulate(m, init, 1.0, 0.01)
    assert np.all(store.uI == 0.3) and np.all(store.uII == -2.0)
    np.testing.assert_array_equal(final.states, init.states)


def test_single_step_zero_dynamics_generic_path():
    m = dataclasses.replace(zero_model(), quadratic=None)
    ens = Ensemble.at_point(m, 3, [1.0, 2.0])
    out = step_euler_maruyama(m, ens, 0.1, RngPolicy(0))
    np.testing.assert_array_equal(out.states, ens.states)


def test_deterministic_decay(backend):
    m = ou_model(d=1.0, sigma=0.0, d_obs=1.0, sigma_obs=0.0)
    _, final = simulate(m, Ensemble.at_point(m, 1, [1.0, 1.0]), 1.0, 0.01)
    # Euler: (1 - dt)^100
    assert final.uII[0, 0] == pytest.approx(0.99**100, rel=1e-12)
    assert abs(final.uII[0, 0] - np.exp(-1)) < 0.01


def test_ou_variance_converges_with_dt():
    m = ou_model(d=1.0, sigma=1.0, d_obs=1.0, sigma_obs=1.0)
    errs = []
    for dt in (1e-2, 1e-3):
        _, final = simulate(m, Ensemble.at_point(m, 40000), 5.0, dt, rng=5, record=False)
        errs.append(abs(final.uII[:, 0].var(ddof=1) - 0.5))
    # Euler stationary variance is sigma^2 / (2d - d^2 dt); statistical error ~ 0.0035
    assert errs[1] < 0.015
    assert errs[1] < errs[0] + 0.01


def test_reproducible(backend):
    m = triad_model(triad_params("I", "triad_modified"))
    a, _ = simulate(m, Ensemble.at_point(m, 20), 0.5, 1e-3, store_stride=10, rng=9)
    b, _ = simulate(m, Ensemble.at_point(m, 20), 0.5, 1e-3, store_stride=10, rng=9)
    assert np.array_equal(a.uI, b.uI) and np.array_equal(a.uII, b.uII)
    c, _ = simulate(m, Ensemble.at_point(m, 20), 0.5, 1e-3, store_stride=10, rng=10)
    assert not np.array_equal(a.uI, c.uI)


def test_permutation_invariance(backend):
    m = triad_model(triad_params("I", "triad_modified"))
    init = Ensemble.at_point(m, 12)
    perm = np.random.default_rng(0).permutation(12)
    _, a = simulate(m, init, 0.3, 1e-3, rng=4, record=False)
    _, b = simulate(m, init.permuted(perm), 0.3, 1e-3, rng=4, record=False)
    np.testing.assert_array_equal(a.states[perm], b.states)


def test_generic_path_matches_kernel():
    m = triad_model(triad_params("I", "triad_damped"))
    generic = dataclasses.replace(m, quadratic=None)
    init = Ensemble.at_point(m, 6, [0.2, -0.1, 0.4])
    _, a = simulate(m, init, 0.2, 1e-3, rng=2, record=False)
    _, b = simulate(generic, init, 0.2, 1e-3, rng=2, record=False)
    np.testing.assert_allclose(a.states, b.states, rtol=1e-12, atol=1e-13)


def test_backends_agree_on_paths():
    if not _backend.compiled_available():
        pytest.skip("compiled kernels not built")
    m = triad_model(triad_params("II", "triad_modified"))
    init = Ensemble.at_point(m, 50)
    out = {}
    for b in ("compiled", "python"):
        with _backend.use_backend(b):
            out[b] = simulate(m, init, 1.0, 1e-3, rng=3, record=False)[1].states
    np.testing.assert_allclose(out["compiled"], out["python"], rtol=1e-10, atol=1e-12)


def test_blowup_detected(backend):
    m = ou_model(d=-100.0, sigma=1.0)
    with pytest.raises(BlowUpError):
        simulate(m, Ensemble.at_point(m, 4, [0.0, 1.0]), 1.0, 1e-2, record=False)


def test_regime_II_u1_variance_grows():
    m = triad_model(triad_params("II", "triad_modified"))
    store, _ = simulate(m, Ensemble.at_point(m, 500), 20.0, 1e-3, store_stride=1000, rng=1)
    v1 = store.uII[:, :, 0].var(axis=1, ddof=1)
    v2 = store.uI[:, :, 0].var(axis=1, ddof=1)
    assert v1[-1] > 3 * v1[5]
    # observed variance plateaus
    assert abs(v2[-1] - v2[10]) < 0.5 * v2[10]


def test_store_times_and_stride():
    m = triad_model(triad_params("I", "triad_modified"))
    store, final = simulate(m, Ensemble.at_point(m, 2), 1.0, 1e-2, store_stride=10)
    np.testing.assert_allclose(store.times, np.arange(11) * 0.1, atol=1e-12)
    assert final.t == pytest.approx(1.0)


def test_moments_examples():
    m = ou_model()
    e = Ensemble.from_states([[-1.0, 3.0], [1.0, 3.0]], 1)
    mom = ensemble_moments(e)
    np.testing.assert_allclose(mom["mean"], [0.0, 3.0])
    np.testing.assert_allclose(mom["variance"], [2.0, 0.0])
    with pytest.raises(ValueError):
        ensemble_moments(Ensemble.at_point(m, 1))


def test_gaussian_initial_ensemble():
    m = ou_model()
    e = Ensemble.gaussian(m, 20000, [1.0, -1.0], [[2.0, 0.5], [0.5, 1.0]], rng=3)
    np.testing.assert_allclose(np.cov(e.states.T), [[2.0, 0.5], [0.5, 1.0]], atol=0.06)


@settings(max_examples=20, deadline=None)
@given(L=st.integers(1, 8), seed=st.integers(0, 2**63), k=st.integers(0, 7))
def test_sample_paths_independent_of_ensemble(L, seed, k):
    m = triad_model(triad_params("I", "triad_damped"))
    k = k % L
    init = Ensemble.at_point(m, L)
    _, full = simulate(m, init, 0.05, 1e-2, rng=seed, record=False)
    single = Ensemble(0.0, init.uI[k:k + 1], init.uII[k:k + 1], init.sample_ids[k:k + 1])
    _, one = simulate(m, single, 0.05, 1e-2, rng=seed, record=False)
    np.testing.assert_array_equal(full.states[k], one.states[0])
