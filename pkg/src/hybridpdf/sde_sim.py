"""Ensemble Euler-Maruyama simulation with counter-based random streams.

Every normal draw is a pure function of ``(master_seed, sample_id, step)``
(Philox4x32-10 + Box-Muller), so a run is reproducible bit for bit, samples
can be processed in any order or in parallel, and permuting the ensemble
permutes the paths without changing any of them.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _backend
from .model import ConditionalGaussianModel

DEFAULT_CAP = 1e8
INIT_STEP = -1  # counter reserved for initial-condition draws


class BlowUpError(RuntimeError):
    """A sample left the finite range or exceeded the magnitude cap."""

    def __init__(self, message: str, sample: int = -1, step: int = -1, t: float = float("nan"),
                 kind: str = "state"):
        super().__init__(message)
        self.sample = sample
        self.step = step
        self.t = t
        self.kind = kind


@dataclass(frozen=True)
class RngPolicy:
    """Counter-based random streams derived from one 64-bit master seed.

    The normal vector used by sample ``i`` at step ``k`` is keyed by the
    counter ``(k, sample_ids[i], block)`` and the seed.
    """

    master_seed: int = 0

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must fit in 64 bits")

    def normals(self, sample_ids, step: int, n: int) -> np.ndarray:
        ids = np.ascontiguousarray(sample_ids, dtype=np.int64)
        return _backend.kernels().philox_normals(int(self.master_seed), ids, int(step), int(n))


def as_rng(rng) -> RngPolicy:
    if isinstance(rng, RngPolicy):
        return rng
    return RngPolicy(int(rng))


@dataclass
class Ensemble:
    """L joint samples ``(u_I, u_II)`` at time ``t``.

    ``step`` is the global step counter that keys the next noise draw and
    ``dUI`` holds the observed increments of the most recent step.
    """

    t: float
    uI: np.ndarray
    uII: np.ndarray
    sample_ids: np.ndarray = None
    step: int = 0
    dUI: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.uI = np.array(self.uI, dtype=float, ndmin=2)
        self.uII = np.array(self.uII, dtype=float, ndmin=2)
        if self.uI.shape[0] != self.uII.shape[0]:
            raise ValueError("uI and uII must have the same number of samples")
        if self.sample_ids is None:
            self.sample_ids = np.arange(self.uI.shape[0], dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if self.sample_ids.shape != (self.uI.shape[0],):
            raise ValueError("sample_ids must have one entry per sample")
        if not (np.all(np.isfinite(self.uI)) and np.all(np.isfinite(self.uII))):
            raise BlowUpError("ensemble contains non-finite states", kind="nonfinite")

    @property
    def n_samples(self) -> int:
        return self.uI.shape[0]

    @property
    def n_obs(self) -> int:
        return self.uI.shape[1]

    @property
    def states(self) -> np.ndarray:
        """Joint states ``(L, N_I + N_II)`` in order (u_I, u_II)."""
        return np.concatenate([self.uI, self.uII], axis=1)

    @classmethod
    def from_states(cls, states, n_obs: int, t: float = 0.0, sample_ids=None, step: int = 0):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        return cls(t, states[:, :n_obs].copy(), states[:, n_obs:].copy(), sample_ids, step)

    @classmethod
    def at_point(cls, model: ConditionalGaussianModel, n_samples: int, point=None, t: float = 0.0):
        """All samples at one point (the origin by default)."""
        if n_samples < 1:
            raise ValueError("n_samples must be positive")
        x = np.zeros(model.dim) if point is None else np.asarray(point, dtype=float)
        if x.shape != (model.dim,):
            raise ValueError(f"point must have {model.dim} components")
        return cls.from_states(np.tile(x, (n_samples, 1)), model.n_obs, t)

    @classmethod
    def gaussian(cls, model: ConditionalGaussianModel, n_samples: int, mean, cov,
                 rng, t: float = 0.0):
        """Samples drawn from N(mean, cov) using the reserved initial-condition counter."""
        rng = as_rng(rng)
        mean = np.asarray(mean, dtype=float)
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        w, V = np.linalg.eigh(cov)
        if w.min() < -1e-12 * max(1.0, abs(w).max()):
            raise ValueError("initial covariance must be PSD")
        root = V * np.sqrt(np.clip(w, 0.0, None))
        ids = np.arange(n_samples, dtype=np.int64)
        z = rng.normals(ids, INIT_STEP, model.dim)
        return cls.from_states(mean + z @ root.T, model.n_obs, t, ids)

    def permuted(self, perm) -> "Ensemble":
        perm = np.asarray(perm)
        return replace(self, uI=self.uI[perm].copy(), uII=self.uII[perm].copy(),
                       sample_ids=self.sample_ids[perm].copy(),
                       dUI=None if self.dUI is None else self.dUI[perm].copy())

    def copy(self) -> "Ensemble":
        return replace(self, uI=self.uI.copy(), uII=self.uII.copy(), sample_ids=self.sample_ids.copy(),
                       dUI=None if self.dUI is None else self.dUI.copy())


@dataclass
class TrajectoryStore:
    """Recorded ensemble paths at a uniform stride.

    ``uI`` has shape ``(n_times, L, N_I)``; ``uII`` is optional.
    """

    times: np.ndarray
    uI: np.ndarray
    uII: np.ndarray | None
    sample_ids: np.ndarray
    stride: int
    dt: float
    names: tuple = ()

    def __post_init__(self):
        if self.times.ndim != 1 or np.any(np.diff(self.times) <= 0):
            raise ValueError("store times must be strictly increasing")

    @property
    def n_samples(self) -> int:
        return self.uI.shape[1]

    def path(self, i: int):
        """(times, uI path) of sample index ``i``."""
        return self.times, self.uI[:, i, :]

    def increments(self) -> np.ndarray:
        """Observed increments between consecutive stored times, ``(n_times-1, L, N_I)``."""
        return np.diff(self.uI, axis=0)

    def to_csv(self, path) -> Path:
        """Write columns (sample, t, components...) ordered by sample then time."""
        path = Path(path)
        names = list(self.names) if self.names else (
            [f"uI{k + 1}" for k in range(self.uI.shape[2])]
            + ([f"uII{k + 1}" for k in range(self.uII.shape[2])] if self.uII is not None else []))
        data = self.uI if self.uII is None else np.concatenate([self.uI, self.uII], axis=2)
        names = names[: data.shape[2]]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "t", *names])
            for i in range(self.n_samples):
                sid = int(self.sample_ids[i])
                for k, t in enumerate(self.times):
                    w.writerow([sid, repr(float(t)), *(repr(float(x)) for x in data[k, i])])
        return path


def n_steps_between(t0: float, t_end: float, dt: float) -> int:
    """Number of dt steps from t0 to t_end; the span must be a multiple of dt."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not t_end > t0:
        raise ValueError("t_end must exceed the current time")
    n = int(round((t_end - t0) / dt))
    if n < 1 or abs(n * dt - (t_end - t0)) > 1e-9 * max(1.0, abs(t_end)):
        raise ValueError(f"t_end - t ({t_end - t0}) is not a multiple of dt ({dt})")
    return n


def _check_states(u: np.ndarray, cap: float, ens: Ensemble, step: int, t: float):
    bad = ~np.all(np.isfinite(u) & (np.abs(u) <= cap), axis=1)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        kind = "nonfinite" if not np.all(np.isfinite(u[i])) else "cap"
        raise BlowUpError(
            f"sample {int(ens.sample_ids[i])} blew up at step {step} (t={t:.6g}): "
            f"{'non-finite state' if kind == 'nonfinite' else f'|u| > cap {cap:g}'}",
            sample=int(ens.sample_ids[i]), step=step, t=t, kind=kind)


def step_euler_maruyama(model: ConditionalGaussianModel, ensemble: Ensemble, dt: float,
                        rng, cap: float = DEFAULT_CAP) -> Ensemble:
    """Advance every sample by one Euler-Maruyama step of size ``dt``.

    The returned ensemble carries the observed increments in ``dUI``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    rng = as_rng(rng)
    n1, n2 = model.n_obs, model.n_hidden
    c = model.coefficients(ensemble.t, ensemble.uI)
    uI, uII = ensemble.uI, ensemble.uII
    z = rng.normals(ensemble.sample_ids, ensemble.step, n1 + n2)
    sq = np.sqrt(dt)
    dI = c["A0"] + np.einsum("bij,bj->bi", c["A1"], uII)
    dII = c["a0"] + np.einsum("bij,bj->bi", c["a1"], uII)
    nI = np.einsum("bij,bj->bi", c["sigma_I"], z[:, :n1])
    nII = np.einsum("bij,bj->bi", c["sigma_II"], z[:, n1:])
    new_I = uI + dI * dt + nI * sq
    new_II = uII + dII * dt + nII * sq
    t_new = ensemble.t + dt
    _check_states(np.concatenate([new_I, new_II], axis=1), cap, ensemble, ensemble.step, t_new)
    return Ensemble(t_new, new_I, new_II, ensemble.sample_ids.copy(), ensemble.step + 1,
                    dUI=new_I - uI)


def raise_kernel_failure(fail_step, fail_kind, ens: Ensemble, t0_step: int, t0: float, dt: float,
                         cap: float):
    """Translate per-sample kernel failure codes into a BlowUpError."""
    failed = np.flatnonzero(fail_kind != 0)
    if failed.size == 0:
        return
    i = int(failed[np.argmin(fail_step[failed])])
    step = int(fail_step[i])
    t = t0 + (step - t0_step + 1) * dt
    kind = "filter" if fail_kind[i] == 2 else "state"
    what = "filter update became non-finite" if kind == "filter" else f"state non-finite or |u| > cap {cap:g}"
    raise BlowUpError(f"sample {int(ens.sample_ids[i])} blew up at step {step} (t={t:.6g}): {what}; "
                      f"{failed.size} sample(s) affected", sample=int(ens.sample_ids[i]), step=step,
                      t=t, kind=kind)


def kernel_arrays(model: ConditionalGaussianModel):
    """Contiguous tensors for the compiled quadratic kernel."""
    q = model.quadratic
    return (np.ascontiguousarray(q.damping), np.ascontiguousarray(q.interaction),
            np.ascontiguousarray(q.forcing), np.ascontiguousarray(q.noise))


def simulate(model: ConditionalGaussianModel, init: Ensemble, t_end: float, dt: float,
             store_stride: int = 1, rng=0, cap: float = DEFAULT_CAP, store_hidden: bool = True,
             record: bool = True, threads: int | None = None) -> tuple[TrajectoryStore | None, Ensemble]:
    """Repeated Euler-Maruyama steps from ``init.t`` to ``t_end``.

    States are recorded at ``init.t`` and after every ``store_stride`` steps.
    Models with a quadratic form run through the ensemble kernel; other
    models use the generic per-step evaluator path.  Returns the store
    (None when ``record`` is False) and the final ensemble.
    """
    rng = as_rng(rng)
    n_steps = n_steps_between(init.t, t_end, dt)
    stride = int(store_stride)
    if stride < 1:
        raise ValueError("store_stride must be >= 1")
    L, N, n1 = init.n_samples, model.dim, model.n_obs
    n_rec = n_steps // stride + 1 if record else 0
    rec = np.empty((n_rec, L, N))
    if record:
        rec[0] = init.states
    if model.quadratic is not None:
        state = np.ascontiguousarray(init.states)
        lam, T, F, S = kernel_arrays(model)
        fail_step = np.full(L, -1, dtype=np.int64)
        fail_kind = np.zeros(L, dtype=np.int32)
        empty2 = np.empty((0, 0))
        _backend.kernels().advance_quadratic(
            state, np.ascontiguousarray(init.sample_ids), lam, T, F, S, n1,
            int(rng.master_seed), int(init.step), int(n_steps), float(dt), stride, float(cap),
            rec, empty2, np.empty((0, 0, 0)), empty2, empty2,
            np.empty((0, 0, 0)), np.empty((0, 0, 0, 0)), empty2, True, fail_step, fail_kind,
            _backend.threads() if threads is None else int(threads))
        raise_kernel_failure(fail_step, fail_kind, init, init.step, init.t, dt, cap)
        prev_I = None
        if n_steps >= 1 and record and stride == 1 and n_rec >= 2:
            prev_I = rec[-2, :, :n1]
        final = Ensemble(init.t + n_steps * dt, state[:, :n1].copy(), state[:, n1:].copy(),
                         init.sample_ids.copy(), init.step + n_steps)
        if prev_I is not None:
            final.dUI = final.uI - prev_I
    else:
        ens = init
        for k in range(n_steps):
            ens = step_euler_maruyama(model, ens, dt, rng, cap)
            ens.t = init.t + (k + 1) * dt
            if record and (k + 1) % stride == 0:
                rec[(k + 1) // stride] = ens.states
        final = ens
    store = None
    if record:
        times = init.t + dt * stride * np.arange(n_rec)
        store = TrajectoryStore(times, rec[:, :, :n1].copy(),
                                rec[:, :, n1:].copy() if store_hidden else None,
                                init.sample_ids.copy(), stride, float(dt), tuple(model.names))
    return store, final


def ensemble_moments(ensemble: Ensemble) -> dict:
    """Unbiased per-component mean and variance of the joint states."""
    if ensemble.n_samples < 2:
        raise ValueError("ensemble_moments needs at least 2 samples")
    X = ensemble.states
    return {"mean": X.mean(axis=0), "variance": X.var(axis=0, ddof=1)}


__all__ = ["BlowUpError", "RngPolicy", "Ensemble", "TrajectoryStore", "step_euler_maruyama",
           "simulate", "ensemble_moments", "n_steps_between", "DEFAULT_CAP"]
