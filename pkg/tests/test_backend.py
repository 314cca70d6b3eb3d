"""Compiled kernels against the numpy fallback."""
from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from hybridpdf import _backend
from hybridpdf.density import GaussianMixture

needs_compiled = pytest.mark.skipif(not _backend.compiled_available(), reason="compiled kernels not built")


def _mixture(rng, M=40, d=3):
    X = rng.standard_normal((M, d, d))
    covs = X @ np.swapaxes(X, 1, 2) + 0.1 * np.eye(d)
    return GaussianMixture(rng.standard_normal((M, d)), covs)


def test_logpdf_matches_scipy(backend):
    rng = np.random.default_rng(0)
    gm = _mixture(rng, M=5)
    pts = rng.standard_normal((30, 3)) * 2
    dens = np.mean([stats.multivariate_normal(gm.means[i], gm.covs[i]).pdf(pts) for i in range(5)], axis=0)
    np.testing.assert_allclose(gm.eval(pts), dens, rtol=1e-12)


@needs_compiled
def test_mixture_logpdf_parity():
    rng = np.random.default_rng(1)
    gm = _mixture(rng)
    pts = rng.standard_normal((500, 3)) * 3
    out = {}
    for b in ("compiled", "python"):
        with _backend.use_backend(b):
            out[b] = gm.logpdf(pts)
    np.testing.assert_allclose(out["compiled"], out["python"], rtol=1e-13, atol=1e-12)


@needs_compiled
def test_threads_do_not_change_results():
    rng = np.random.default_rng(2)
    gm = _mixture(rng)
    pts = rng.standard_normal((2000, 3))
    with _backend.use_backend("compiled"):
        _backend.set_threads(1)
        a = gm.logpdf(pts)
        _backend.set_threads(3)
        try:
            b = gm.logpdf(pts)
        finally:
            _backend.set_threads(1)
    np.testing.assert_array_equal(a, b)


def test_backend_switching():
    before = _backend.name()
    with _backend.use_backend("python"):
        assert _backend.name() == "python"
    assert _backend.name() == before
    with pytest.raises(ValueError):
        _backend.set_backend("fortran")
    with pytest.raises(ValueError):
        _backend.set_threads(0)
