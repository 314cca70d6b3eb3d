"""Estimator quality and the computable objects of the stability theory.

MISE with its bias/variance split, the variance and bias bounds of the
hybrid and direct-kernel estimators, L-scaling experiments, controllability
and observability Gramians, and the lower/upper bounds on the posterior
covariance.  Reference densities come either from a Gaussian in closed form
or from a large Monte Carlo ensemble smoothed by a binned Gaussian KDE.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import linalg as sla
from scipy import ndimage

from .cg_filter import _observation_inverse, simulate_and_filter
from .density import (Bandwidth, ConfigurationError, GaussianMixture, GridDensity, build_hybrid,
                      direct_kde, scaling_bandwidth, silverman_bandwidth, trapezoid_weights)
from .model import ConditionalGaussianModel, GaussianSpec
from .sde_sim import Ensemble, simulate


def derive_seed(*keys: int) -> int:
    """Deterministic 63-bit seed from integer keys."""
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    return obj


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# reference densities

def grid_spec(grid: GridDensity) -> dict:
    return {"names": list(grid.names), "n_points": [int(a.size) for a in grid.axes],
            "lower": [float(a[0]) for a in grid.axes], "upper": [float(a[-1]) for a in grid.axes]}


def grid_moments(grid: GridDensity) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard deviation per axis of a grid density (normalized by its mass)."""
    mass = grid.mass
    mean, std = [], []
    for k, a in enumerate(grid.axes):
        g = grid.marginal([k])
        m1 = g.integrate(g.values * a) / mass
        m2 = g.integrate(g.values * (a - m1) ** 2) / mass
        mean.append(m1)
        std.append(math.sqrt(max(m2, 0.0)))
    return np.array(mean), np.array(std)


def analytic_reference(spec: GaussianSpec, axes, dims=None) -> GridDensity:
    """Gaussian marginal of ``spec`` over ``dims`` tabulated on ``axes``."""
    dims = list(range(len(spec.mean))) if dims is None else [int(d) for d in np.atleast_1d(dims)]
    cov = spec.covariance[np.ix_(dims, dims)]
    g = GaussianMixture(spec.mean[dims][None], cov[None])
    names = tuple(spec.names[d] for d in dims) if spec.names else ()
    return GridDensity(tuple(axes), g.eval_grid(axes), names)


def _uniform_step(a: np.ndarray) -> float:
    d = np.diff(a)
    if not np.allclose(d, d[0], rtol=1e-9, atol=0.0):
        raise ConfigurationError("Monte Carlo reference grids must be uniform")
    return float(d[0])


def mc_reference(samples, axes, bandwidth: Bandwidth | None = None, names=(),
                 refine_ratio: float = 3.0, pad_sd: float = 5.0) -> GridDensity:
    """Binned Gaussian KDE of a large sample on a uniform tensor grid.

    Samples are linearly binned onto a grid that contains the requested
    nodes and has spacing at most ``h / refine_ratio`` per direction (``h`` is
    the kernel standard deviation), padded by ``pad_sd`` kernel widths; the
    binned counts are smoothed with a separable Gaussian filter and sampled
    back at the requested nodes.  Default bandwidth: Silverman's rule.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if X.ndim == 2 and X.shape[0] == 1 and len(axes) == 1:
        X = X.T
    axes = tuple(np.asarray(a, dtype=float) for a in axes)
    d = len(axes)
    if X.shape[1] != d:
        raise ConfigurationError("one axis per sample coordinate is required")
    if not np.all(np.isfinite(X)):
        raise ConfigurationError("reference samples must be finite")
    bw = silverman_bandwidth(X) if bandwidth is None else bandwidth
    h = np.sqrt(bw.variances)
    fine_axes, sub, offs = [], [], []
    for k, a in enumerate(axes):
        step = _uniform_step(a)
        r = max(1, int(math.ceil(step * refine_ratio / h[k])))
        fs = step / r
        pad = int(math.ceil(pad_sd * h[k] / fs))
        n = (a.size - 1) * r + 1 + 2 * pad
        fine_axes.append(a[0] - pad * fs + fs * np.arange(n))
        sub.append(r)
        offs.append(pad)
    shape = tuple(f.size for f in fine_axes)
    flat = np.zeros(int(np.prod(shape)))
    # linear binning: 2^d corners per sample
    base, frac = [], []
    for k in range(d):
        fs = fine_axes[k][1] - fine_axes[k][0]
        pos = (X[:, k] - fine_axes[k][0]) / fs
        i0 = np.floor(pos).astype(np.int64)
        base.append(i0)
        frac.append(pos - i0)
    strides = np.cumprod((1,) + shape[::-1])[:-1][::-1]
    for corner in range(2 ** d):
        idx = np.zeros(X.shape[0], dtype=np.int64)
        w = np.ones(X.shape[0])
        ok = np.ones(X.shape[0], dtype=bool)
        for k in range(d):
            bit = (corner >> k) & 1
            ik = base[k] + bit
            ok &= (ik >= 0) & (ik < shape[k])
            w = w * (frac[k] if bit else 1.0 - frac[k])
            idx += ik * strides[k]
        flat += np.bincount(idx[ok], weights=w[ok], minlength=flat.size)
    counts = flat.reshape(shape)
    cell = 1.0
    sig = []
    for k in range(d):
        fs = fine_axes[k][1] - fine_axes[k][0]
        cell *= fs
        sig.append(h[k] / fs)
    smooth = ndimage.gaussian_filter(counts, sigma=sig, mode="constant", cval=0.0, truncate=6.0)
    sl = tuple(slice(offs[k], offs[k] + (axes[k].size - 1) * sub[k] + 1, sub[k]) for k in range(d))
    vals = smooth[sl] / (X.shape[0] * cell)
    vals = np.where(vals < 1e-300, 0.0, vals)
    return GridDensity(axes, vals, tuple(names))


def mc_oracle(model: ConditionalGaussianModel, n_samples: int, times: Sequence[float], dt: float,
              seed: int, init_point=None, threads: int | None = None) -> dict:
    """Brute-force ensemble states at each requested time, keyed by time.

    All samples start at ``init_point`` (origin by default); states are
    returned as ``(n_samples, N)`` arrays in model order.
    """
    ens = Ensemble.at_point(model, int(n_samples), point=init_point)
    out = {}
    for t in sorted(float(x) for x in times):
        if t > ens.t:
            _, ens = simulate(model, ens, t, dt, rng=seed, record=False, threads=threads)
        out[t] = ens.states.copy()
    return out


# --------------------------------------------------------------------------
# MISE

@dataclass
class MiseReport:
    """MISE of repeated estimates against a reference on a shared grid.

    ``mise`` is the mean integrated squared error computed directly from the
    repeats; ``bias = int |p_bar - p_ref|^2`` and ``variance`` is the mean of
    ``int |p_hat - p_bar|^2`` (divisor n_repeats).  ``variance_unbiased``
    rescales by ``n/(n-1)``.
    """

    mise: float
    bias: float
    variance: float
    n_repeats: int
    grid: dict
    reference: dict
    ise: list = field(default_factory=list)
    variance_terms: list = field(default_factory=list)
    seeds: list = field(default_factory=list)

    @property
    def decomposition_residual(self) -> float:
        """Relative gap between ``mise`` and ``bias + variance``."""
        s = self.bias + self.variance
        return abs(self.mise - s) / max(abs(self.mise), 1e-300)

    @property
    def variance_unbiased(self) -> float:
        n = self.n_repeats
        return self.variance * n / (n - 1)

    @property
    def variance_stderr(self) -> float:
        """Standard error of ``variance`` across repeats."""
        v = np.asarray(self.variance_terms)
        return float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")

    @property
    def mise_stderr(self) -> float:
        e = np.asarray(self.ise)
        return float(e.std(ddof=1) / math.sqrt(e.size)) if e.size > 1 else float("nan")

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(decomposition_residual=self.decomposition_residual,
                 variance_unbiased=self.variance_unbiased,
                 variance_stderr=self.variance_stderr, mise_stderr=self.mise_stderr)
        return d

    def to_json(self, path) -> Path:
        return write_json(self.as_dict(), path)


def _values_on(est, reference: GridDensity) -> np.ndarray:
    if isinstance(est, GridDensity):
        if not est.same_grid(reference):
            raise ConfigurationError("estimate and reference grids differ")
        return est.values
    if hasattr(est, "eval_grid"):
        return est.eval_grid(reference.axes)
    vals = np.asarray(est, dtype=float)
    if vals.shape != reference.values.shape:
        raise ConfigurationError(f"estimate values have shape {vals.shape}, "
                                 f"reference grid is {reference.values.shape}")
    return vals


def mise_from_estimates(estimates: Sequence, reference: GridDensity, seeds=(),
                        reference_info: dict | None = None) -> MiseReport:
    """MISE report from precomputed estimates (grids, mixtures or value arrays)."""
    if len(estimates) < 2:
        raise ConfigurationError("at least 2 repeats are needed")
    P = np.stack([_values_on(e, reference) for e in estimates])
    w = reference.weights
    # offset from the first repeat keeps identical repeats exactly at zero variance
    pbar = P[0] + (P - P[0]).mean(axis=0)
    ise = [float(np.sum(w * (p - reference.values) ** 2)) for p in P]
    vterms = [float(np.sum(w * (p - pbar) ** 2)) for p in P]
    bias = float(np.sum(w * (pbar - reference.values) ** 2))
    return MiseReport(mise=float(np.mean(ise)), bias=bias, variance=float(np.mean(vterms)),
                      n_repeats=len(estimates), grid=grid_spec(reference),
                      reference=dict(reference_info or {}), ise=ise, variance_terms=vterms,
                      seeds=[int(s) for s in seeds])


def estimate_mise(factory: Callable[[int], object], reference: GridDensity, n_repeats: int,
                  seeds: Sequence[int] | None = None, base_seed: int = 0,
                  reference_info: dict | None = None) -> MiseReport:
    """Build ``n_repeats`` independent estimates with ``factory(seed)`` and compare to ``reference``.

    ``factory`` may return a GridDensity on the reference grid, any object
    with ``eval_grid`` (a mixture), or an array of values on the grid.
    """
    n_repeats = int(n_repeats)
    if n_repeats < 2:
        raise ConfigurationError("estimate_mise needs n_repeats >= 2")
    if seeds is None:
        seeds = [derive_seed(base_seed, r) for r in range(n_repeats)]
    seeds = list(seeds)[:n_repeats]
    if len(seeds) < n_repeats:
        raise ConfigurationError("fewer seeds than repeats")
    return mise_from_estimates([factory(s) for s in seeds], reference, seeds, reference_info)


# --------------------------------------------------------------------------
# MISE bounds

def variance_bound(covs, bandwidth: Bandwidth, L: int) -> float:
    """Hybrid variance bound ``(1/L) mean_i [prod_k (pi H c_k^2) det(pi R_i)]^(-1/2)``."""
    R = np.asarray(covs, dtype=float)
    if R.ndim == 0:
        R = R.reshape(1, 1, 1)
    elif R.ndim == 1:
        R = R[:, None, None]
    elif R.ndim == 2:
        R = R[None]
    n2 = R.shape[-1]
    sign, logdet = np.linalg.slogdet(np.pi * R)
    if np.any(sign <= 0):
        raise ConfigurationError("singular posterior covariance; regularize before bounding")
    kern = np.sum(np.log(np.pi * bandwidth.variances))
    return float(np.mean(np.exp(-0.5 * (kern + logdet))) / int(L)) if n2 else float("nan")


def kernel_variance_bound(bandwidth: Bandwidth, L: int) -> float:
    """All-kernel variance bound ``(1/L) prod_k (pi H c_k^2)^(-1/2)``.

    Applies to the direct KDE over every coordinate and to the observed
    marginal of the hybrid estimator.
    """
    return float(np.exp(-0.5 * np.sum(np.log(np.pi * bandwidth.variances))) / int(L))


def direct_variance_bound(bandwidth: Bandwidth, L: int) -> float:
    return kernel_variance_bound(bandwidth, L)


def marginal_hidden_mise_bound(covs, L: int) -> float:
    """``(1/L) mean_i det(pi R_i)^(-1/2)`` for the conditional Gaussian mixture over ``u_II``."""
    R = np.asarray(covs, dtype=float)
    R = R.reshape((-1,) + R.shape[-2:]) if R.ndim >= 2 else R.reshape(-1, 1, 1)
    sign, logdet = np.linalg.slogdet(np.pi * R)
    if np.any(sign <= 0):
        raise ConfigurationError("singular posterior covariance; regularize before bounding")
    return float(np.mean(np.exp(-0.5 * logdet)) / int(L))


def variance_bound_ratio(covs, bandwidth_joint: Bandwidth, n_obs: int) -> float:
    """Direct over hybrid variance bound, ``H^(-N_II/2) prod c_hidden / mean det(R)^(-1/2)``."""
    R = np.asarray(covs, dtype=float)
    n2 = R.shape[-1]
    c_hidden = bandwidth_joint.c[n_obs:]
    num = bandwidth_joint.H ** (-n2 / 2.0) / np.prod(c_hidden)
    _, logdet = np.linalg.slogdet(R)
    return float(num / np.mean(np.exp(-0.5 * logdet)))


def bias_bound_report(reference: GridDensity, bandwidth: Bandwidth, delta: float = 0.1,
                      kernel_axes=None) -> float:
    """Leading bias bound ``(1+delta)/4 H^2 J(sum_k c_k^2 d^2 p/du_k^2)``.

    Second derivatives are second-order finite differences along the kernel
    axes (``kernel_axes``, default the first ``len(c)`` axes); ``J`` is the
    grid quadrature of the square.  The third-order remainder is omitted.
    """
    if not delta > 0:
        raise ConfigurationError("delta must be positive")
    axes = list(range(bandwidth.c.size)) if kernel_axes is None else [int(k) for k in kernel_axes]
    if len(axes) != bandwidth.c.size:
        raise ConfigurationError("one bandwidth factor per kernel axis is required")
    for a in reference.axes:
        if a.size < 5:
            raise ConfigurationError("grid too coarse for second differences (need >= 5 points per axis)")
    lap = np.zeros_like(reference.values)
    for ck, ax in zip(bandwidth.c, axes):
        x = reference.axes[ax]
        d1 = np.gradient(reference.values, x, axis=ax, edge_order=2)
        lap += ck**2 * np.gradient(d1, x, axis=ax, edge_order=2)
    J = reference.integrate(lap**2)
    return float((1.0 + delta) / 4.0 * bandwidth.H**2 * J)


# --------------------------------------------------------------------------
# scaling experiment

@dataclass
class ScalingResult:
    Ls: list
    reports: dict          # estimator -> list of MiseReport (one per L)
    bounds: dict           # estimator -> list of variance bounds (one per L)
    slopes: dict           # estimator -> fitted log-log slope
    settings: dict

    def rows(self) -> list:
        out = []
        for j, L in enumerate(self.Ls):
            row = {"L": int(L)}
            for name, reps in self.reports.items():
                row[f"mise_{name}"] = reps[j].mise
                row[f"bias_{name}"] = reps[j].bias
                row[f"variance_{name}"] = reps[j].variance
                row[f"bound_{name}"] = self.bounds[name][j]
            out.append(row)
        return out

    def to_csv(self, path) -> Path:
        import csv

        path = Path(path)
        rows = self.rows()
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(rows[0]))
            for r in rows:
                w.writerow([r["L"]] + [repr(float(v)) for k, v in r.items() if k != "L"])
        return path


def fit_slope(Ls, values) -> float:
    """Least-squares slope of log(values) against log(Ls)."""
    x = np.log(np.asarray(Ls, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    if x.size < 2 or np.ptp(x) == 0 or not np.all(np.isfinite(y)):
        raise ConfigurationError("degenerate scaling fit")
    return float(np.polyfit(x, y, 1)[0])


SCALING_ESTIMATORS = ("hybrid", "direct", "hidden")


def mise_scaling_experiment(model: ConditionalGaussianModel, Ls: Sequence[int], t_eval: float,
                            reference: GridDensity, n_repeats: int, dt: float, seed: int = 0,
                            reference_hidden: GridDensity | None = None,
                            c_obs=None, c_joint=None, kappa: float = 1.0,
                            estimators: Sequence[str] = SCALING_ESTIMATORS,
                            init_point=None, delta: float = 1e-6,
                            threads: int | None = None) -> ScalingResult:
    """MISE against ``reference`` for each ensemble size in ``Ls``.

    ``reference`` is the joint density on a grid in model state order;
    ``reference_hidden`` the density of ``u_II`` (needed for the ``hidden``
    estimator).  The hybrid bandwidth uses ``H = kappa L^(-2/(4+N_I))`` with
    factors ``c_obs``; the direct KDE ``H = kappa L^(-2/(4+N_I+N_II))`` with
    ``c_joint``; both default to the reference standard deviations.
    """
    Ls = [int(L) for L in Ls]
    if len(Ls) < 4 or max(Ls) < 10 * min(Ls) - 1e-9:
        raise ConfigurationError("scaling needs at least 4 ensemble sizes spanning a decade")
    unknown = set(estimators) - set(SCALING_ESTIMATORS)
    if unknown:
        raise ConfigurationError(f"unknown estimators {sorted(unknown)}")
    if "hidden" in estimators and reference_hidden is None:
        raise ConfigurationError("the hidden-marginal estimator needs reference_hidden")
    n1, n2 = model.n_obs, model.n_hidden
    _, std = grid_moments(reference)
    c_obs = std[:n1] if c_obs is None else np.asarray(c_obs, dtype=float)
    c_joint = std if c_joint is None else np.asarray(c_joint, dtype=float)
    refs = {"hybrid": reference, "direct": reference, "hidden": reference_hidden}
    reports = {e: [] for e in estimators}
    bounds = {e: [] for e in estimators}
    for L in Ls:
        bw_h = scaling_bandwidth(L, n1, c_obs, kappa)
        bw_d = scaling_bandwidth(L, n1 + n2, c_joint, kappa)
        est = {e: [] for e in estimators}
        seeds = []
        covs_all = []
        for r in range(int(n_repeats)):
            s = derive_seed(seed, L, r)
            seeds.append(s)
            init = Ensemble.at_point(model, L, point=init_point)
            _, _, fin, fst = simulate_and_filter(model, init, t_eval, dt, rng=s, record=False,
                                                 threads=threads)
            mix = build_hybrid(fin.uI, fst, bw_h, delta=delta)
            covs_all.append(mix.hidden_covs)
            if "hybrid" in est:
                est["hybrid"].append(mix.eval_grid(reference.axes))
            if "direct" in est:
                est["direct"].append(direct_kde(fin.states, bw_d).eval_grid(reference.axes))
            if "hidden" in est:
                est["hidden"].append(mix.marginal_hidden().eval_grid(reference_hidden.axes))
        covs_all = np.concatenate(covs_all)
        for e in estimators:
            reports[e].append(mise_from_estimates(est[e], refs[e], seeds, {"L": L}))
            if e == "hybrid":
                bounds[e].append(variance_bound(covs_all, bw_h, L))
            elif e == "direct":
                bounds[e].append(direct_variance_bound(bw_d, L))
            else:
                bounds[e].append(marginal_hidden_mise_bound(covs_all, L))
    slopes = {e: fit_slope(Ls, [r.mise for r in reports[e]]) for e in estimators}
    settings = {"t_eval": float(t_eval), "dt": float(dt), "n_repeats": int(n_repeats),
                "seed": int(seed), "kappa": float(kappa), "c_obs": c_obs, "c_joint": c_joint,
                "delta": float(delta)}
    return ScalingResult(Ls, reports, bounds, slopes, settings)


# --------------------------------------------------------------------------
# Gramians and posterior-covariance bounds

def _path_window(uI_path, s: float, t: float, dt: float, t0: float):
    path = np.atleast_2d(np.asarray(uI_path, dtype=float))
    if not t > s:
        raise ConfigurationError("need t > s")
    i0 = int(round((s - t0) / dt))
    i1 = int(round((t - t0) / dt))
    tol = 1e-6 * dt
    if abs(t0 + i0 * dt - s) > tol or abs(t0 + i1 * dt - t) > tol:
        raise ConfigurationError("s and t must fall on the path's time grid")
    if i0 < 0 or i1 >= path.shape[0]:
        raise ConfigurationError(f"trajectory gap: path covers [{t0}, {t0 + (path.shape[0] - 1) * dt}], "
                                 f"requested [{s}, {t}]")
    return path[i0:i1 + 1], t0 + dt * np.arange(i0, i1 + 1)


def matrix_flow(model: ConditionalGaussianModel, uI_path, s: float, t: float, dt: float,
                t0: float = 0.0):
    """Fundamental matrices ``Phi_k`` of ``dPhi/dt = a1 Phi`` on ``[s, t]`` with ``Phi(s) = I``.

    ``E_{r_j, r_k} = Phi_k Phi_j^{-1}``.  Each step applies the exact
    exponential of the frozen coefficient.
    """
    seg, times = _path_window(uI_path, s, t, dt, t0)
    n2 = model.n_hidden
    Phi = np.empty((times.size, n2, n2))
    Phi[0] = np.eye(n2)
    for k in range(times.size - 1):
        a1 = model.coefficients(times[k], seg[k])["a1"][0]
        Phi[k + 1] = sla.expm(a1 * dt) @ Phi[k]
    return times, Phi


def _trapz(vals: np.ndarray, dt: float) -> np.ndarray:
    w = np.full(vals.shape[0], dt)
    w[0] = w[-1] = 0.5 * dt
    return np.tensordot(w, vals, axes=(0, 0))


@dataclass
class GramianReport:
    s: float
    t: float
    C: np.ndarray
    O: np.ndarray
    flow: np.ndarray
    flow_cond: float
    C_bracket: tuple | None = None
    h_bound: float | None = None
    g_bound: float | None = None
    notes: list = field(default_factory=list)

    @property
    def within_bracket(self) -> bool | None:
        if self.C_bracket is None:
            return None
        ev = np.linalg.eigvalsh(0.5 * (self.C + self.C.T))
        lo, hi = self.C_bracket
        return bool(ev.min() >= lo * (1 - 1e-9) and ev.max() <= hi * (1 + 1e-9))

    def as_dict(self) -> dict:
        d = asdict(self)
        d["within_bracket"] = self.within_bracket
        return d

    def to_json(self, path) -> Path:
        return write_json(self.as_dict(), path)


def controllability_gramian(model: ConditionalGaussianModel, uI_path, s: float, t: float, dt: float,
                            t0: float = 0.0, constants: dict | None = None) -> GramianReport:
    """Controllability and observability Gramians on ``[s, t]`` along an observed path.

    ``C = int_s^t E_{r,t} Sigma_II Sigma_II^* E_{r,t}^* dr`` and
    ``O = int_s^t E_{r,t}^{-*} A1^* (Sigma_I Sigma_I^*)^{-1} A1 E_{r,t}^{-1} dr``,
    both by the trapezoid rule on the path's time grid.  With ``constants``
    (from ``energy_model_constants``) the report also carries the bracket
    ``[D_c^-1 sigma_II-^2 (t-s), D_c sigma_II+^2 (t-s)]`` for the spectrum of C.
    """
    seg, times = _path_window(uI_path, s, t, dt, t0)
    _, Phi = matrix_flow(model, uI_path, s, t, dt, t0)
    PhiT = Phi[-1]
    cs = [model.coefficients(tk, seg[k]) for k, tk in enumerate(times)]
    A1 = np.concatenate([c["A1"] for c in cs])
    SI = np.concatenate([c["sigma_I"] for c in cs])
    SII = np.concatenate([c["sigma_II"] for c in cs])
    E = PhiT[None] @ np.linalg.inv(Phi)              # E_{r_k, t}
    Einv = Phi @ np.linalg.inv(PhiT)[None]           # E_{r_k, t}^{-1}
    Q = SII @ np.swapaxes(SII, 1, 2)
    obs = np.swapaxes(A1, 1, 2) @ _observation_inverse(SI) @ A1
    C = _trapz(E @ Q @ np.swapaxes(E, 1, 2), dt)
    O = _trapz(np.swapaxes(Einv, 1, 2) @ obs @ Einv, dt)
    C = 0.5 * (C + C.T)
    O = 0.5 * (O + O.T)
    rep = GramianReport(float(s), float(t), C, O, PhiT.copy(), float(np.linalg.cond(PhiT)))
    if constants is not None:
        Dc = constants.get("Dc", float("inf"))
        if math.isfinite(Dc):
            rep.C_bracket = (constants["sigma_II_minus"] ** 2 * (t - s) / Dc,
                             Dc * constants["sigma_II_plus"] ** 2 * (t - s))
        else:
            rep.notes.append("controllability constants not applicable; bracket not evaluated")
    return rep


def observability_gramian(model, uI_path, s: float, t: float, dt: float, t0: float = 0.0) -> np.ndarray:
    return controllability_gramian(model, uI_path, s, t, dt, t0).O


@dataclass
class BoundCheck:
    """One-sided bound on the posterior covariance at time ``t``."""

    name: str
    t: float
    value: float          # h or g
    bound: float          # h^-1 (lower) or g (upper)
    observed: float       # min eigenvalue or spectral norm of R_II(t)
    holds: bool | None
    applicable: bool
    notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def _power_integral(seg: np.ndarray, m: float, dt: float) -> float:
    r = np.linalg.norm(seg, axis=1)
    return float(_trapz(r ** (2.0 * m), dt))


def h_value(uI_path, t: float, dt: float, v: float, m: float, Dc: float, sigma_II_minus: float,
            sigma_II_plus: float, t0: float = 0.0) -> float:
    """``h = v^2 s+^2 s-^-2 Dc^6 (v + int |u_I|^2m) + v^-1 Dc s-^-2`` over ``[t-v, t]``."""
    seg, _ = _path_window(uI_path, t - v, t, dt, t0)
    if not sigma_II_minus > 0 or not math.isfinite(Dc):
        return float("inf")
    I = _power_integral(seg, m, dt)
    sm2 = sigma_II_minus ** -2
    return float(v**2 * sigma_II_plus**2 * sm2 * Dc**6 * (v + I) + Dc * sm2 / v)


def r2_lower_bound(uI_path, t: float, dt: float, v: float, m: float, Dc: float,
                   sigma_II_minus: float, sigma_II_plus: float, R=None, t0: float = 0.0,
                   n_hidden: int | None = None) -> BoundCheck:
    """Lower bound ``R_II(t) >= h^-1 I``; compared with the smallest eigenvalue of ``R``."""
    if t < v - 1e-12:
        raise ConfigurationError("the lower bound needs t >= v")
    h = h_value(uI_path, t, dt, v, m, Dc, sigma_II_minus, sigma_II_plus, t0)
    notes = []
    applicable = math.isfinite(h)
    if not applicable:
        notes.append("vacuous: Sigma_II singular or constants not applicable")
    nh = n_hidden if n_hidden is not None else (None if R is None else np.atleast_2d(R).shape[-1])
    if nh == 1:
        notes.append("outside stated hypothesis (N_II = 1)")
    obs = float("nan")
    holds = None
    if R is not None:
        obs = float(np.linalg.eigvalsh(np.atleast_2d(np.asarray(R, dtype=float))).min())
        holds = bool(obs >= 1.0 / h) if applicable else None
    return BoundCheck("R_II lower bound", float(t), h, (1.0 / h) if applicable else 0.0, obs, holds,
                      applicable, notes)


def sigma_A_minus_sq(model: ConditionalGaussianModel, uI_path, times) -> np.ndarray:
    """Smallest eigenvalue of ``A1^* (Sigma_I Sigma_I^*)^-1 A1`` along the path."""
    out = np.empty(len(times))
    for k, tk in enumerate(times):
        c = model.coefficients(tk, uI_path[k])
        M = np.swapaxes(c["A1"], 1, 2) @ _observation_inverse(c["sigma_I"]) @ c["A1"]
        out[k] = max(float(np.linalg.eigvalsh(0.5 * (M[0] + M[0].T)).min()), 0.0)
    return out


def g_value(uI_path, t: float, dt: float, v: float, m: float, Dc: float, sigma_II_plus: float,
            sigma_A_sq, t0: float = 0.0) -> float:
    """``g = Dc^2 (v + int |u_I|^2m) + v Dc^5 s+^2 (v + int |u_I|^2m)^2 (int sigma_A^2)^-2``."""
    seg, _ = _path_window(uI_path, t - v, t, dt, t0)
    if not math.isfinite(Dc):
        return float("inf")
    I = _power_integral(seg, m, dt)
    SA = float(_trapz(np.asarray(sigma_A_sq, dtype=float), dt))
    if not SA > 0:
        return float("inf")
    return float(Dc**2 * (v + I) + v * Dc**5 * sigma_II_plus**2 * (v + I) ** 2 / SA**2)


def r2_upper_bound(model: ConditionalGaussianModel, uI_path, t: float, dt: float, v: float, m: float,
                   Dc: float, sigma_II_plus: float, R=None, sigma_A_lower=None,
                   t0: float = 0.0) -> BoundCheck:
    """Upper bound ``||R_II(t)|| <= g``; ``sigma_A_lower`` (squared, per path step) defaults to
    the smallest eigenvalue of ``A1^*(Sigma_I Sigma_I^*)^-1 A1`` along the path."""
    if t < v - 1e-12:
        raise ConfigurationError("the upper bound needs t >= v")
    seg, times = _path_window(uI_path, t - v, t, dt, t0)
    sA = sigma_A_minus_sq(model, seg, times) if sigma_A_lower is None else np.asarray(sigma_A_lower)
    g = g_value(uI_path, t, dt, v, m, Dc, sigma_II_plus, sA, t0)
    applicable = math.isfinite(g)
    notes = [] if applicable else ["vacuous: no observability on the window or constants not applicable"]
    if model.n_hidden == 1:
        notes.append("outside stated hypothesis (N_II = 1)")
    obs = float("nan")
    holds = None
    if R is not None:
        obs = float(np.linalg.norm(np.atleast_2d(np.asarray(R, dtype=float)), 2))
        holds = bool(obs <= g) if applicable else None
    return BoundCheck("R_II upper bound", float(t), g, g, obs, holds, applicable, notes)


class Timer:
    """Context manager collecting wall-clock seconds."""

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0
        return False


__all__ = [
    "MiseReport", "GramianReport", "BoundCheck", "ScalingResult", "estimate_mise",
    "mise_from_estimates", "variance_bound", "kernel_variance_bound", "direct_variance_bound",
    "marginal_hidden_mise_bound", "variance_bound_ratio", "bias_bound_report",
    "mise_scaling_experiment", "fit_slope", "controllability_gramian", "observability_gramian",
    "matrix_flow", "r2_lower_bound", "r2_upper_bound", "h_value", "g_value", "sigma_A_minus_sq",
    "analytic_reference", "mc_reference", "mc_oracle", "grid_moments", "grid_spec", "derive_seed",
    "write_json",
]
