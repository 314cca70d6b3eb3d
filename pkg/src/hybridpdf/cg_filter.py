"""Closed-form conditional Gaussian filter along observed paths.

Given an observed path ``u_I``, the posterior of ``u_II`` is Gaussian with
mean ``m`` and covariance ``R`` solving

    dm = (a0 + a1 m) dt + R A1^T (Sigma_I Sigma_I^T)^{-1} (du_I - (A0 + A1 m) dt)
    dR = (a1 R + R a1^T + Sigma_II Sigma_II^T - R A1^T (Sigma_I Sigma_I^T)^{-1} A1 R) dt

Both are stepped with forward Euler at the simulation step; ``R`` is then
symmetrized and its negative eigenvalues are clipped to zero.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _backend
from .model import ConditionalGaussianModel, ModelError
from .sde_sim import (DEFAULT_CAP, BlowUpError, Ensemble, TrajectoryStore, as_rng,
                      kernel_arrays, n_steps_between, raise_kernel_failure)

EIG_FLOOR_REPORT = 1e-10


class FilterBlowUpError(BlowUpError):
    """The filter update produced non-finite values."""


@dataclass
class FilterState:
    """Posterior mean ``(..., N_II)`` and covariance ``(..., N_II, N_II)``."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        if self.mean.ndim == 0:
            self.mean = self.mean[None]
        if self.cov.ndim < 2:
            self.cov = self.cov.reshape(self.mean.shape[-1:] * 2)
        if self.cov.shape[-2:] != (self.mean.shape[-1],) * 2:
            raise ValueError("cov must be (..., N_II, N_II) matching mean")

    def broadcast(self, L: int) -> "FilterState":
        """Batched copy with ``L`` rows."""
        n2 = self.mean.shape[-1]
        m = np.broadcast_to(self.mean, (L, n2)).copy()
        R = np.broadcast_to(self.cov, (L, n2, n2)).copy()
        return FilterState(m, R)


def _observation_inverse(sigma_I: np.ndarray) -> np.ndarray:
    """Batched inverse of Sigma_I Sigma_I^T with a singularity check."""
    SS = sigma_I @ np.swapaxes(sigma_I, -1, -2)
    cond = np.linalg.cond(SS)
    if not np.all(np.isfinite(cond)) or np.any(cond > 1e14):
        raise ModelError("Sigma_I Sigma_I^T is singular; the observation noise must be non-degenerate")
    return np.linalg.inv(SS)


def floor_psd(R: np.ndarray) -> np.ndarray:
    """Clip negative eigenvalues of symmetric matrices ``(..., n, n)`` to zero."""
    n = R.shape[-1]
    if n == 1:
        return np.maximum(R, 0.0)
    w, V = np.linalg.eigh(R)
    if np.all(w >= 0.0):
        return R
    w = np.maximum(w, 0.0)
    Rc = np.einsum("...pk,...k,...qk->...pq", V, w, V)
    return 0.5 * (Rc + np.swapaxes(Rc, -1, -2))


def min_eigenvalue(R: np.ndarray) -> np.ndarray:
    n = R.shape[-1]
    if n == 1:
        return R[..., 0, 0].copy()
    return np.linalg.eigvalsh(R)[..., 0]


def riccati_step(A1, a1, Sinv, Q, R, dt: float, psd_floor: bool = True) -> np.ndarray:
    """One forward-Euler step of the covariance equation (batched)."""
    G = R @ np.swapaxes(A1, -1, -2) @ Sinv
    dR = a1 @ R + R @ np.swapaxes(a1, -1, -2) + Q - G @ A1 @ R
    Rn = R + dR * dt
    Rn = 0.5 * (Rn + np.swapaxes(Rn, -1, -2))
    return floor_psd(Rn) if psd_floor else Rn


def filter_step(model: ConditionalGaussianModel, t: float, uI, dUI, state: FilterState, dt: float,
                psd_floor: bool = True) -> FilterState:
    """Forward-Euler update of the posterior mean and covariance.

    ``uI`` is the observed state at the start of the step and ``dUI`` the
    observed increment over the step.  Accepts a single sample (1-D ``uI``)
    or a batch ``(L, N_I)`` with a matching batched ``state``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    uI = np.asarray(uI, dtype=float)
    single = uI.ndim == 1
    uI2 = np.atleast_2d(uI)
    dU = np.atleast_2d(np.asarray(dUI, dtype=float))
    m = np.atleast_2d(state.mean)
    R = state.cov if state.cov.ndim == 3 else state.cov[None]
    c = model.coefficients(t, uI2)
    Sinv = _observation_inverse(c["sigma_I"])
    A1, a1 = c["A1"], c["a1"]
    innov = dU - (c["A0"] + np.einsum("bij,bj->bi", A1, m)) * dt
    G = R @ np.swapaxes(A1, 1, 2) @ Sinv
    mean = m + (c["a0"] + np.einsum("bij,bj->bi", a1, m)) * dt + np.einsum("bij,bj->bi", G, innov)
    Q = c["sigma_II"] @ np.swapaxes(c["sigma_II"], 1, 2)
    cov = riccati_step(A1, a1, Sinv, Q, R, dt, psd_floor)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        bad = int(np.flatnonzero(~(np.all(np.isfinite(mean), axis=1)
                                   & np.all(np.isfinite(cov), axis=(1, 2))))[0])
        raise FilterBlowUpError(f"filter update became non-finite for sample index {bad} at t={t:.6g}",
                                sample=bad, t=t, kind="filter")
    if single:
        return FilterState(mean[0], cov[0])
    return FilterState(mean, cov)


@dataclass
class FilterRun:
    """Posterior statistics per sample at the recorded times.

    ``mean`` is ``(n_times, L, N_II)``, ``cov`` ``(n_times, L, N_II, N_II)``
    and ``min_eig`` the smallest eigenvalue of each recorded covariance.
    A sample is flagged degenerate when ``min_eig`` falls below
    ``eig_floor_report`` at any recorded time after the initial one.
    """

    times: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    min_eig: np.ndarray
    sample_ids: np.ndarray
    eig_floor_report: float = EIG_FLOOR_REPORT

    @property
    def degenerate(self) -> np.ndarray:
        if self.min_eig.shape[0] <= 1:
            return self.min_eig[0] < self.eig_floor_report
        return np.any(self.min_eig[1:] < self.eig_floor_report, axis=0)

    @property
    def n_degenerate(self) -> int:
        return int(np.count_nonzero(self.degenerate))

    def index_of(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} not recorded in the filter run")
        return k

    def state_at(self, t: float) -> FilterState:
        k = self.index_of(t)
        return FilterState(self.mean[k], self.cov[k])

    def to_csv(self, path, names=None) -> Path:
        """Columns: sample, t, mean components, covariance upper triangle, degenerate."""
        path = Path(path)
        n2 = self.mean.shape[2]
        names = list(names) if names else [f"uII{k + 1}" for k in range(n2)]
        iu = np.triu_indices(n2)
        cov_cols = [f"R_{names[a]}_{names[b]}" for a, b in zip(*iu)]
        deg = self.degenerate
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "t", *(f"mean_{n}" for n in names), *cov_cols, "degenerate"])
            for i in range(self.mean.shape[1]):
                for k, t in enumerate(self.times):
                    w.writerow([int(self.sample_ids[i]), repr(float(t)),
                                *(repr(float(x)) for x in self.mean[k, i]),
                                *(repr(float(x)) for x in self.cov[k, i][iu]), int(deg[i])])
        return path


def _initial_filter(init_filter, L: int, n2: int, uII0=None) -> FilterState:
    if init_filter is None:
        if uII0 is None:
            raise ValueError("no initial filter state and no initial hidden states")
        return FilterState(np.array(uII0, dtype=float), np.zeros((L, n2, n2)))
    if init_filter.mean.ndim == 1:
        return init_filter.broadcast(L)
    if init_filter.mean.shape != (L, n2):
        raise ValueError("batched initial filter state does not match the ensemble size")
    return FilterState(init_filter.mean.copy(), init_filter.cov.copy())


def run_filters(model: ConditionalGaussianModel, store: TrajectoryStore, initial: FilterState | None,
                dt: float, eig_floor_report: float = EIG_FLOOR_REPORT, psd_floor: bool = True,
                record_stride: int = 1) -> FilterRun:
    """Run one filter per stored observed path.

    The store must hold every step (stride 1, same ``dt``).  ``initial`` is
    shared by all samples; ``None`` means mean = stored ``u_II(0)`` and zero
    covariance.
    """
    if store.stride != 1 or abs(store.dt - dt) > 1e-15 * max(1.0, dt):
        raise ValueError("run_filters needs the observed path at every filter step (stride 1, same dt)")
    L = store.n_samples
    n2 = model.n_hidden
    st = _initial_filter(initial, L, n2, None if store.uII is None else store.uII[0])
    n = store.times.shape[0]
    rec_idx = np.arange(0, n, int(record_stride))
    means = np.empty((rec_idx.size, L, n2))
    covs = np.empty((rec_idx.size, L, n2, n2))
    means[0], covs[0] = st.mean, st.cov
    r = 1
    for k in range(n - 1):
        try:
            st = filter_step(model, store.times[k], store.uI[k], store.uI[k + 1] - store.uI[k],
                             st, dt, psd_floor)
        except FilterBlowUpError as exc:
            sid = int(store.sample_ids[exc.sample])
            raise FilterBlowUpError(f"filter blew up for sample {sid} at t={store.times[k + 1]:.6g}",
                                    sample=sid, step=k, t=float(store.times[k + 1]), kind="filter") from exc
        if r < rec_idx.size and k + 1 == rec_idx[r]:
            means[r], covs[r] = st.mean, st.cov
            r += 1
    return FilterRun(store.times[rec_idx].copy(), means, covs, min_eigenvalue(covs),
                     store.sample_ids.copy(), eig_floor_report)


def simulate_and_filter(model: ConditionalGaussianModel, init: Ensemble, t_end: float, dt: float,
                        store_stride: int = 1, rng=0, filter_init: FilterState | None = None,
                        cap: float = DEFAULT_CAP, psd_floor: bool = True,
                        eig_floor_report: float = EIG_FLOOR_REPORT, record: bool = True,
                        threads: int | None = None):
    """Simulate the ensemble and run every sample's filter in the same pass.

    Returns ``(store, filter_run, final_ensemble, final_filter_state)``; the
    store and the filter run share the recorded times (every
    ``store_stride`` steps plus the initial time).  The default filter start
    is the known initial state: mean ``u_II(0)``, covariance 0.
    """
    rng = as_rng(rng)
    n_steps = n_steps_between(init.t, t_end, dt)
    stride = int(store_stride)
    if stride < 1:
        raise ValueError("store_stride must be >= 1")
    L, N, n1, n2 = init.n_samples, model.dim, model.n_obs, model.n_hidden
    fst = _initial_filter(filter_init, L, n2, init.uII)
    n_rec = n_steps // stride + 1 if record else 0
    rec = np.empty((n_rec, L, N))
    rm = np.empty((n_rec, L, n2))
    rR = np.empty((n_rec, L, n2, n2))
    re = np.empty((n_rec, L))
    if record:
        rec[0] = init.states
        rm[0], rR[0] = fst.mean, fst.cov
        re[0] = min_eigenvalue(fst.cov)
    if model.quadratic is not None:
        q = model.quadratic
        Sinv = _observation_inverse(q.sigma_I[None])[0]
        Q = q.sigma_II @ q.sigma_II.T
        state = np.ascontiguousarray(init.states)
        m = np.ascontiguousarray(fst.mean)
        R = np.ascontiguousarray(fst.cov)
        lam, T, F, S = kernel_arrays(model)
        fail_step = np.full(L, -1, dtype=np.int64)
        fail_kind = np.zeros(L, dtype=np.int32)
        _backend.kernels().advance_quadratic(
            state, np.ascontiguousarray(init.sample_ids), lam, T, F, S, n1,
            int(rng.master_seed), int(init.step), int(n_steps), float(dt), stride, float(cap),
            rec, m, R, np.ascontiguousarray(Sinv), np.ascontiguousarray(Q), rm, rR, re,
            bool(psd_floor), fail_step, fail_kind,
            _backend.threads() if threads is None else int(threads))
        raise_kernel_failure(fail_step, fail_kind, init, init.step, init.t, dt, cap)
        final = Ensemble(init.t + n_steps * dt, state[:, :n1].copy(), state[:, n1:].copy(),
                         init.sample_ids.copy(), init.step + n_steps)
        fst = FilterState(m, R)
    else:
        from .sde_sim import step_euler_maruyama

        ens = init
        for k in range(n_steps):
            new = step_euler_maruyama(model, ens, dt, rng, cap)
            new.t = init.t + (k + 1) * dt
            try:
                fst = filter_step(model, ens.t, ens.uI, new.dUI, fst, dt, psd_floor)
            except FilterBlowUpError as exc:
                sid = int(init.sample_ids[exc.sample])
                raise FilterBlowUpError(f"filter blew up for sample {sid} at t={new.t:.6g}",
                                        sample=sid, step=k, t=new.t, kind="filter") from exc
            ens = new
            if record and (k + 1) % stride == 0:
                j = (k + 1) // stride
                rec[j] = ens.states
                rm[j], rR[j] = fst.mean, fst.cov
                re[j] = min_eigenvalue(fst.cov)
        final = ens
    store = run = None
    if record:
        times = init.t + dt * stride * np.arange(n_rec)
        store = TrajectoryStore(times, rec[:, :, :n1].copy(), rec[:, :, n1:].copy(),
                                init.sample_ids.copy(), stride, float(dt), tuple(model.names))
        run = FilterRun(times.copy(), rm, rR, re, init.sample_ids.copy(), eig_floor_report)
    return store, run, final, fst


@dataclass
class ContractionResult:
    times: np.ndarray
    distance: np.ndarray
    R: np.ndarray
    R_prime: np.ndarray

    def fitted_rate(self, t_min: float = 0.0) -> float:
        """Least-squares decay rate of log distance over times >= t_min (nan if undefined)."""
        sel = (self.times >= t_min) & (self.distance > 0)
        if np.count_nonzero(sel) < 2:
            return float("nan")
        return float(-np.polyfit(self.times[sel], np.log(self.distance[sel]), 1)[0])

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "distance"])
            for t, d in zip(self.times, self.distance):
                w.writerow([repr(float(t)), repr(float(d))])
        return path


def riccati_contraction_experiment(model: ConditionalGaussianModel, uI_path, R0, R0_prime, dt: float,
                                   horizon: float | None = None, t0: float = 0.0,
                                   psd_floor: bool = True, record_stride: int = 1) -> ContractionResult:
    """Run two covariance flows from ``R0`` and ``R0_prime`` along one observed path.

    ``uI_path`` holds the observed states at ``t0 + k dt``.  Returns the
    spectral-norm distance ``||R(t) - R'(t)||`` at every ``record_stride``
    steps up to ``horizon`` (the whole path by default).
    """
    path = np.atleast_2d(np.asarray(uI_path, dtype=float))
    if path.shape[1] != model.n_obs:
        path = path.T if path.shape[0] == model.n_obs else path
    n2 = model.n_hidden
    R = np.atleast_2d(np.asarray(R0, dtype=float)).reshape(n2, n2)
    Rp = np.atleast_2d(np.asarray(R0_prime, dtype=float)).reshape(n2, n2)
    for M in (R, Rp):
        if not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() <= 0:
            raise ValueError("R0 and R0_prime must be symmetric positive definite")
    n = path.shape[0] - 1
    if horizon is not None:
        n = min(n, int(round(horizon / dt)))
    times = [t0]
    dist = [float(np.linalg.norm(R - Rp, 2))]
    Rs, Rps = [R.copy()], [Rp.copy()]
    for k in range(n):
        t = t0 + k * dt
        c = model.coefficients(t, path[k])
        Sinv = _observation_inverse(c["sigma_I"])
        Q = c["sigma_II"] @ np.swapaxes(c["sigma_II"], 1, 2)
        both = riccati_step(c["A1"], c["a1"], Sinv, Q, np.stack([R, Rp]), dt, psd_floor)
        R, Rp = both[0], both[1]
        if not np.all(np.isfinite(both)):
            raise FilterBlowUpError(f"covariance flow became non-finite at t={t + dt:.6g}", t=t + dt,
                                    kind="filter")
        if (k + 1) % record_stride == 0:
            times.append(t0 + (k + 1) * dt)
            dist.append(float(np.linalg.norm(R - Rp, 2)))
            Rs.append(R.copy())
            Rps.append(Rp.copy())
    return ContractionResult(np.array(times), np.array(dist), np.array(Rs), np.array(Rps))


__all__ = ["FilterState", "FilterRun", "FilterBlowUpError", "filter_step", "run_filters",
           "simulate_and_filter", "riccati_step", "riccati_contraction_experiment",
           "ContractionResult", "floor_psd", "min_eigenvalue", "EIG_FLOOR_REPORT"]
