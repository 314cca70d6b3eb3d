"""Density estimators: hybrid kernel/conditional-Gaussian mixtures and direct KDE.

The hybrid estimator at time t is the mixture

    p(u_I, u_II) = (1/L) sum_i N(u_I; u_I^i, H diag(c^2)) N(u_II; m_i, R_i)

with one component per sample: a Gaussian kernel around the observed sample
and the closed-form conditional Gaussian of the hidden variables.  The direct
estimator uses kernels in all coordinates.  Everything is evaluated in log
space with a max shift; values below 1e-300 are returned as 0.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _backend

TINY = 1e-300
LOG_TINY = np.log(TINY)
DEFAULT_DELTA = 1e-6


class ConfigurationError(ValueError):
    """Inputs that cannot define an estimator."""


# --------------------------------------------------------------------------
# bandwidths

@dataclass(frozen=True)
class Bandwidth:
    """Kernel covariance ``H * diag(c**2)``."""

    H: float
    c: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        if not (np.isfinite(self.H) and self.H > 0):
            raise ConfigurationError(f"bandwidth H must be positive, got {self.H}")
        if np.any(~np.isfinite(c)) or np.any(c <= 0):
            raise ConfigurationError("bandwidth factors c must be positive")
        object.__setattr__(self, "H", float(self.H))
        object.__setattr__(self, "c", c)

    @property
    def variances(self) -> np.ndarray:
        """Per-direction kernel variances ``H c_i^2``."""
        return self.H * self.c**2

    def restrict(self, dims) -> "Bandwidth":
        return Bandwidth(self.H, self.c[np.asarray(dims)])

    def as_dict(self) -> dict:
        return {"H": self.H, "c": [float(x) for x in self.c]}


def sample_scale(samples) -> np.ndarray:
    """Per-direction sample standard deviations (n-1 divisor)."""
    X = np.asarray(samples, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    if X.shape[0] < 2:
        raise ConfigurationError("at least 2 samples are needed to estimate a scale")
    s = X.std(axis=0, ddof=1)
    if np.any(s <= 0):
        bad = [int(k) for k in np.flatnonzero(s <= 0)]
        raise ConfigurationError(f"zero sample variance in direction(s) {bad}; supply explicit factors c")
    return s


def scaling_bandwidth(L: int, n_dims: int, c=None, kappa: float = 1.0) -> Bandwidth:
    """``H = kappa * L^(-2/(4 + n_dims))`` with direction factors ``c`` (ones by default)."""
    if int(L) < 2:
        raise ConfigurationError("scaling_bandwidth needs L >= 2")
    if int(n_dims) < 0:
        raise ConfigurationError("n_dims must be nonnegative")
    if not kappa > 0:
        raise ConfigurationError("kappa must be positive")
    H = kappa * float(L) ** (-2.0 / (4.0 + n_dims))
    if c is None:
        c = np.ones(max(int(n_dims), 1))
    return Bandwidth(H, c)


def silverman_bandwidth(samples) -> Bandwidth:
    """Normal-reference rule: ``c`` = sample std, ``H = (4/(n+2))^(2/(n+4)) L^(-2/(n+4))``."""
    X = np.asarray(samples, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    L, n = X.shape
    c = sample_scale(X)
    H = (4.0 / (n + 2.0)) ** (2.0 / (n + 4.0)) * L ** (-2.0 / (n + 4.0))
    return Bandwidth(H, c)


# --------------------------------------------------------------------------
# Gaussian mixtures

class GaussianMixture:
    """Equally weighted Gaussian mixture with means ``(M, d)`` and covariances ``(M, d, d)``."""

    def __init__(self, means, covs):
        means = np.atleast_2d(np.asarray(means, dtype=float))
        covs = np.asarray(covs, dtype=float)
        if covs.ndim == 2:
            covs = np.stack([np.diag(v) for v in covs]) if covs.shape == means.shape else covs[None]
        M, d = means.shape
        if covs.shape != (M, d, d):
            raise ConfigurationError(f"covariances must have shape {(M, d, d)}, got {covs.shape}")
        self.means = means
        self.covs = covs
        self._whiten = None

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n_components, 1.0 / self.n_components)

    @property
    def is_diagonal(self) -> bool:
        off = self.covs.copy()
        idx = np.arange(self.dim)
        off[:, idx, idx] = 0.0
        return not np.any(off)

    def _factors(self):
        if self._whiten is None:
            try:
                Lc = np.linalg.cholesky(self.covs)
            except np.linalg.LinAlgError as exc:
                raise ConfigurationError("mixture covariance is not positive definite; "
                                         "regularize degenerate components") from exc
            eye = np.broadcast_to(np.eye(self.dim), Lc.shape)
            W = np.linalg.solve(Lc, eye)
            W = np.tril(W)
            logdet_half = np.sum(np.log(np.diagonal(Lc, axis1=1, axis2=2)), axis=1)
            log_norm = (-0.5 * self.dim * np.log(2.0 * np.pi) - logdet_half
                        - np.log(self.n_components))
            self._whiten = (np.ascontiguousarray(W), np.ascontiguousarray(log_norm))
        return self._whiten

    def logpdf(self, points) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=float)))
        if X.shape[1] != self.dim:
            raise ConfigurationError(f"points have {X.shape[1]} coordinates, mixture has {self.dim}")
        if not np.all(np.isfinite(X)):
            raise ConfigurationError("evaluation points must be finite")
        W, log_norm = self._factors()
        return _backend.kernels().mixture_logpdf(X, np.ascontiguousarray(self.means), W, log_norm,
                                                 _backend.threads())

    def eval(self, points) -> np.ndarray:
        """Density at ``points`` ``(P, d)``; underflowing values are exactly 0."""
        lp = self.logpdf(points)
        return np.where(lp < LOG_TINY, 0.0, np.exp(np.maximum(lp, LOG_TINY)))

    __call__ = eval

    def eval_grid(self, axes: Sequence[np.ndarray], chunk_elems: int = 4_000_000) -> np.ndarray:
        """Density on the tensor grid spanned by ``axes``; shape ``(len(a) for a in axes)``."""
        axes = [np.asarray(a, dtype=float) for a in axes]
        if len(axes) != self.dim:
            raise ConfigurationError("one axis per mixture dimension is required")
        shape = tuple(a.size for a in axes)
        if not self.is_diagonal:
            mesh = np.meshgrid(*axes, indexing="ij")
            pts = np.stack([g.ravel() for g in mesh], axis=1)
            return self.eval(pts).reshape(shape)
        M = self.n_components
        var = np.diagonal(self.covs, axis1=1, axis2=2)
        factors = []
        for k, a in enumerate(axes):
            z = (a[None, :] - self.means[:, k:k + 1]) ** 2 / var[:, k:k + 1]
            factors.append(np.exp(-0.5 * z) / np.sqrt(2.0 * np.pi * var[:, k:k + 1]))
        if self.dim == 1:
            out = factors[0].sum(axis=0) / M
        else:
            lead = int(np.prod(shape[:-1]))
            out = np.zeros((lead, shape[-1]))
            step = max(1, chunk_elems // max(1, lead))
            for s in range(0, M, step):
                W = factors[0][s:s + step]
                for f in factors[1:-1]:
                    W = (W[:, :, None] * f[s:s + step, None, :]).reshape(W.shape[0], -1)
                out += W.T @ factors[-1][s:s + step]
            out = out.reshape(shape) / M
        return np.where(out < TINY, 0.0, out)

    def marginal(self, dims) -> "GaussianMixture":
        dims = np.atleast_1d(np.asarray(dims, dtype=int))
        return GaussianMixture(self.means[:, dims], self.covs[:, dims][:, :, dims])

    def linear_map(self, P) -> "GaussianMixture":
        """Push-forward under ``x -> P x``."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        return GaussianMixture(self.means @ P.T, P @ self.covs @ P.T)


@dataclass(frozen=True)
class Projection:
    """Linear map ``u_II -> P u_II`` onto a lower-dimensional hidden subspace."""

    P: np.ndarray

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if np.linalg.matrix_rank(P) != P.shape[0]:
            raise ConfigurationError("projection matrix must have full row rank")
        object.__setattr__(self, "P", P)

    @classmethod
    def select(cls, n_hidden: int, coords) -> "Projection":
        coords = list(np.atleast_1d(coords))
        return cls(np.eye(n_hidden)[coords])


@dataclass
class HybridMixture:
    """One component per sample: kernel around ``centers[i]`` times ``N(hidden_means[i], hidden_covs[i])``."""

    centers: np.ndarray
    bandwidth: Bandwidth
    hidden_means: np.ndarray
    hidden_covs: np.ndarray
    degenerate: np.ndarray
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.hidden_means = np.atleast_2d(np.asarray(self.hidden_means, dtype=float))
        L, n1 = self.centers.shape
        n2 = self.hidden_means.shape[1]
        if self.hidden_means.shape[0] != L or self.hidden_covs.shape != (L, n2, n2):
            raise ConfigurationError("mismatched sample counts between centers and filter states")
        if self.bandwidth.c.shape != (n1,):
            raise ConfigurationError("bandwidth must have one factor per observed direction")

    @property
    def n_components(self) -> int:
        return self.centers.shape[0]

    @property
    def n_obs(self) -> int:
        return self.centers.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.hidden_means.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n_components, 1.0 / self.n_components)

    def as_gaussian_mixture(self) -> GaussianMixture:
        L, n1, n2 = self.n_components, self.n_obs, self.n_hidden
        covs = np.zeros((L, n1 + n2, n1 + n2))
        idx = np.arange(n1)
        covs[:, idx, idx] = self.bandwidth.variances
        covs[:, n1:, n1:] = self.hidden_covs
        return GaussianMixture(np.concatenate([self.centers, self.hidden_means], axis=1), covs)

    def eval(self, points) -> np.ndarray:
        return self.as_gaussian_mixture().eval(points)

    def eval_grid(self, axes) -> np.ndarray:
        return self.as_gaussian_mixture().eval_grid(axes)

    def marginal_hidden(self) -> GaussianMixture:
        return GaussianMixture(self.hidden_means, self.hidden_covs)

    def marginal_observed(self) -> GaussianMixture:
        L = self.n_components
        covs = np.broadcast_to(np.diag(self.bandwidth.variances), (L, self.n_obs, self.n_obs)).copy()
        return GaussianMixture(self.centers, covs)

    def project(self, projection: "Projection | np.ndarray") -> "HybridMixture":
        P = projection.P if isinstance(projection, Projection) else Projection(projection).P
        if P.shape[1] != self.n_hidden:
            raise ConfigurationError("projection width must equal the hidden dimension")
        covs = P @ self.hidden_covs @ P.T
        return HybridMixture(self.centers, self.bandwidth, self.hidden_means @ P.T, covs,
                             self.degenerate.copy(), self.delta)

    def to_csv(self, path, obs_names=None, hidden_names=None) -> Path:
        """One row per component: center, kernel variances, hidden mean, hidden covariance upper triangle."""
        path = Path(path)
        n1, n2 = self.n_obs, self.n_hidden
        on = list(obs_names) if obs_names else [f"uI{k + 1}" for k in range(n1)]
        hn = list(hidden_names) if hidden_names else [f"uII{k + 1}" for k in range(n2)]
        iu = np.triu_indices(n2)
        kv = self.bandwidth.variances
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["component", "weight", *(f"center_{n}" for n in on), *(f"kvar_{n}" for n in on),
                        *(f"mean_{n}" for n in hn), *(f"cov_{hn[a]}_{hn[b]}" for a, b in zip(*iu)),
                        "degenerate"])
            wt = repr(1.0 / self.n_components)
            for i in range(self.n_components):
                w.writerow([i, wt, *(repr(float(x)) for x in self.centers[i]),
                            *(repr(float(x)) for x in kv),
                            *(repr(float(x)) for x in self.hidden_means[i]),
                            *(repr(float(x)) for x in self.hidden_covs[i][iu]),
                            int(self.degenerate[i])])
        return path


def regularize(covs: np.ndarray, delta: float = DEFAULT_DELTA,
               eig_floor: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Add ``delta * I`` to covariances whose smallest eigenvalue is below ``eig_floor``.

    Returns the regularized covariances and the degenerate flags.
    """
    covs = np.asarray(covs, dtype=float)
    n = covs.shape[-1]
    mins = covs[:, 0, 0] if n == 1 else np.linalg.eigvalsh(covs)[:, 0]
    deg = mins < eig_floor
    out = covs.copy()
    out[deg] += delta * np.eye(n)
    return out, deg


def build_hybrid(uI, filter_state, bandwidth: Bandwidth, delta: float = DEFAULT_DELTA,
                 eig_floor: float = 1e-10) -> HybridMixture:
    """Hybrid mixture from observed samples ``(L, N_I)`` and their filter states.

    ``filter_state`` is a batched FilterState (or any object with ``mean``
    ``(L, N_II)`` and ``cov`` ``(L, N_II, N_II)``).  Degenerate covariances
    (smallest eigenvalue below ``eig_floor``) get ``delta * I`` added.
    """
    uI = np.atleast_2d(np.asarray(uI, dtype=float))
    mean = np.atleast_2d(np.asarray(filter_state.mean, dtype=float))
    cov = np.asarray(filter_state.cov, dtype=float)
    if mean.shape[0] != uI.shape[0] or cov.shape[0] != uI.shape[0]:
        raise ConfigurationError(f"mismatched sample counts: {uI.shape[0]} observed samples, "
                                 f"{mean.shape[0]} filter states")
    covs, deg = regularize(cov, delta, eig_floor)
    return HybridMixture(uI.copy(), bandwidth, mean.copy(), covs, deg, float(delta))


def eval_hybrid(mixture: HybridMixture, points) -> np.ndarray:
    return mixture.eval(points)


def direct_kde(samples, bandwidth: Bandwidth) -> GaussianMixture:
    """Gaussian KDE with kernel covariance ``H diag(c^2)`` as a mixture."""
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if X.shape[1] != bandwidth.c.shape[0]:
        raise ConfigurationError("bandwidth must have one factor per sample coordinate")
    L, d = X.shape
    covs = np.broadcast_to(np.diag(bandwidth.variances), (L, d, d)).copy()
    return GaussianMixture(X, covs)


def eval_direct_kde(samples, bandwidth: Bandwidth, points) -> np.ndarray:
    return direct_kde(samples, bandwidth).eval(points)


def marginal_hidden(mixture: HybridMixture) -> GaussianMixture:
    return mixture.marginal_hidden()


def marginal_observed(mixture: HybridMixture) -> GaussianMixture:
    return mixture.marginal_observed()


def project_mixture(mixture: HybridMixture, projection) -> HybridMixture:
    return mixture.project(projection)


def gaussian_l2_norm(cov) -> float:
    """Integral of the squared Gaussian density, ``det(4 pi cov)^(-1/2)``."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
        raise ConfigurationError("covariance must be a symmetric matrix")
    try:
        Lc = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError("covariance must be positive definite") from exc
    n = cov.shape[0]
    logdet = 2.0 * np.sum(np.log(np.diag(Lc)))
    return float(np.exp(-0.5 * (n * np.log(4.0 * np.pi) + logdet)))


# --------------------------------------------------------------------------
# grids

def trapezoid_weights(axis: np.ndarray) -> np.ndarray:
    a = np.asarray(axis, dtype=float)
    w = np.zeros_like(a)
    d = np.diff(a)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


@dataclass
class GridDensity:
    """Density values on a tensor grid with trapezoid quadrature weights."""

    axes: tuple
    values: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        self.axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        for a in self.axes:
            if a.ndim != 1 or a.size < 2 or np.any(np.diff(a) <= 0):
                raise ConfigurationError("grid axes must be sorted with at least 2 points")
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != tuple(a.size for a in self.axes):
            raise ConfigurationError("grid values do not match the axes")
        if not self.names:
            self.names = tuple(f"x{k + 1}" for k in range(len(self.axes)))

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def weights(self) -> np.ndarray:
        w = np.ones(())
        for a in self.axes:
            w = np.multiply.outer(w, trapezoid_weights(a))
        return w

    def integrate(self, f: np.ndarray) -> float:
        """Quadrature of an array defined on this grid."""
        out = np.asarray(f, dtype=float)
        for a in reversed(self.axes):
            out = out @ trapezoid_weights(a)
        return float(out)

    @property
    def mass(self) -> float:
        return self.integrate(self.values)

    def same_grid(self, other: "GridDensity") -> bool:
        return (len(self.axes) == len(other.axes)
                and all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.axes, other.axes)))

    def l2_distance_sq(self, other: "GridDensity") -> float:
        if not self.same_grid(other):
            raise ConfigurationError("grid mismatch")
        return self.integrate((self.values - other.values) ** 2)

    def marginal(self, keep) -> "GridDensity":
        """Integrate out every axis not in ``keep`` (trapezoid rule)."""
        keep = [int(k) for k in np.atleast_1d(keep)]
        vals = self.values
        for ax in sorted(set(range(self.ndim)) - set(keep), reverse=True):
            vals = np.tensordot(vals, trapezoid_weights(self.axes[ax]), axes=([ax], [0]))
        rest = [k for k in range(self.ndim) if k in keep]
        perm = [rest.index(k) for k in keep]
        vals = np.transpose(vals, perm)
        return GridDensity(tuple(self.axes[k] for k in keep), vals, tuple(self.names[k] for k in keep))

    def to_csv(self, path) -> Path:
        """Axis columns then the density value, last axis varying fastest."""
        path = Path(path)
        mesh = np.meshgrid(*self.axes, indexing="ij")
        cols = [g.ravel() for g in mesh] + [self.values.ravel()]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*self.names, "density"])
            for row in zip(*cols):
                w.writerow([repr(float(x)) for x in row])
        return path


def eval_on_grid(evaluator: "Callable | GaussianMixture | HybridMixture", axes, names=()) -> GridDensity:
    """Evaluate a density on the tensor grid spanned by ``axes``.

    Mixtures use their separable grid path; any other callable receives an
    array of points ``(P, d)`` and must return ``P`` values.
    """
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    for a in axes:
        if a.ndim != 1 or a.size < 2 or np.any(np.diff(a) <= 0):
            raise ConfigurationError("grid axes must be sorted with at least 2 points")
    if hasattr(evaluator, "eval_grid"):
        vals = evaluator.eval_grid(axes)
    else:
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in mesh], axis=1)
        vals = np.asarray(evaluator(pts), dtype=float).reshape(tuple(a.size for a in axes))
    return GridDensity(axes, vals, tuple(names))


def default_axes(mean, std, n_points: int = 100, n_std: float = 5.0) -> list:
    """Axes over ``mean +- n_std * std`` with ``n_points`` points each."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    std = np.atleast_1d(np.asarray(std, dtype=float))
    return [np.linspace(m - n_std * s, m + n_std * s, int(n_points)) for m, s in zip(mean, std)]


def gaussian_density(mean, cov) -> Callable:
    """Evaluator of a single Gaussian density (points ``(P, d)``)."""
    return GaussianMixture(np.atleast_1d(mean)[None], np.atleast_2d(cov)[None])


__all__ = [
    "Bandwidth", "GaussianMixture", "HybridMixture", "GridDensity", "Projection", "ConfigurationError",
    "scaling_bandwidth", "silverman_bandwidth", "sample_scale", "build_hybrid", "eval_hybrid",
    "direct_kde", "eval_direct_kde", "marginal_hidden", "marginal_observed", "project_mixture",
    "gaussian_l2_norm", "eval_on_grid", "default_axes", "trapezoid_weights", "regularize",
    "gaussian_density", "DEFAULT_DELTA",
]
