"""Command-line driver: simulate, estimate, compare, diagnose.

Every command reads a JSON config (defaults if none), applies ``--set``
overrides, writes CSV/JSON data files into the output directory and finishes
with ``manifest.json`` listing the resolved config, timings, warnings and a
sha256 checksum per emitted file.  Data files carry no timestamps, so a
rerun with the same config and seed reproduces them byte for byte.

Exit codes: 0 success, 2 configuration error, 3 numerical blow-up,
4 failed checks (only with ``--check``).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__, _backend
from .cg_filter import FilterState, riccati_contraction_experiment, simulate_and_filter
from .config import ConfigError, RunConfig, load_config, resolve_bandwidth
from .density import (ConfigurationError, Projection, build_hybrid, direct_kde,
                      eval_on_grid)
from .diagnostics import (Timer, controllability_gramian, mc_oracle, mc_reference,
                          mise_scaling_experiment, r2_lower_bound, r2_upper_bound, write_json)
from .model import ModelError, check_dissipativity, check_energy_conservation, energy_model_constants
from .sde_sim import BlowUpError, Ensemble, simulate

EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP, EXIT_CHECK = 0, 2, 3, 4


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, command: str, cfg: RunConfig):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []
        self.timings: dict[str, float] = {}
        self.warnings: list[str] = []
        self.checks: dict[str, bool] = {}
        self.degenerate: dict[str, int] = {}
        self.extra: dict = {}
        self.started = time.time()

    def path(self, name: str) -> Path:
        p = self.out / name
        self.files.append(p)
        return p

    def timed(self, label: str):
        run = self

        class _T(Timer):
            def __exit__(self, *exc):
                super().__exit__(*exc)
                run.timings[label] = run.timings.get(label, 0.0) + self.seconds
                return False

        return _T()

    def write_manifest(self, status: str) -> Path:
        inventory = []
        for p in sorted(set(self.files)):
            if p.exists():
                inventory.append({"path": p.name, "bytes": p.stat().st_size, "sha256": sha256_file(p)})
        manifest = {
            "command": self.command,
            "status": status,
            "version": __version__,
            "backend": _backend.name(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "config": self.cfg.as_dict(),
            "started_unix": self.started,
            "wall_seconds": time.time() - self.started,
            "timings": self.timings,
            "degenerate_counts": self.degenerate,
            "warnings": self.warnings,
            "checks": self.checks,
            "files": inventory,
            **self.extra,
        }
        target = self.out / "manifest.json"
        fd, tmp = tempfile.mkstemp(dir=self.out, prefix=".manifest-", suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                json.dump(_clean(manifest), fh, indent=2, sort_keys=True)
                fh.write("\n")
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return target


def _clean(obj):
    from .diagnostics import _jsonable

    return _jsonable(obj)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _tag(t: float) -> str:
    return f"t{t:g}"


def _panel_pairs(names) -> list[tuple[int, int]]:
    order = sorted(range(len(names)), key=lambda k: names[k])
    if len(order) == 2:
        return [(order[0], order[1])]
    if len(order) == 3:
        return [(order[0], order[1]), (order[1], order[2]), (order[2], order[0])]
    return [(i, j) for i in order for j in order if i < j]


def _axes_for(samples: np.ndarray, n_points: int, n_std: float) -> list:
    mean = samples.mean(axis=0)
    std = samples.std(axis=0, ddof=1) if samples.shape[0] > 1 else np.zeros(samples.shape[1])
    std = np.where(std > 0, std, 1.0)
    return [np.linspace(m - n_std * s, m + n_std * s, int(n_points)) for m, s in zip(mean, std)]


def _write_rows(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([x if isinstance(x, (int, str)) else repr(float(x)) for x in r])
    return path


# --------------------------------------------------------------------------
# commands

def cmd_simulate(cfg: RunConfig, run: Run) -> None:
    model = cfg.model.build()
    init = Ensemble.at_point(model, cfg.L)
    with run.timed("simulate"):
        store, final = simulate(model, init, cfg.horizon, cfg.dt, store_stride=cfg.store_stride,
                                rng=cfg.seed, cap=cfg.blowup_cap, threads=cfg.threads)
    store.to_csv(run.path("trajectories.csv"))
    X = np.concatenate([store.uI, store.uII], axis=2)
    names = list(model.names)
    ddof = 1 if cfg.L > 1 else 0
    mean = X.mean(axis=1)
    var = X.var(axis=1, ddof=ddof)
    rows = [[t, *mean[k], *var[k]] for k, t in enumerate(store.times)]
    _write_rows(run.path("moments.csv"), ["t", *(f"mean_{n}" for n in names), *(f"var_{n}" for n in names)],
                rows)
    run.extra["final_time"] = float(final.t)


def _oracle(cfg: RunConfig, model, times):
    if cfg.reference.kind != "mc" or not times:
        return {}
    dt = cfg.reference.dt or cfg.dt
    return mc_oracle(model, cfg.reference.n_samples, times, dt, cfg.reference.seed, threads=cfg.threads)


def cmd_estimate(cfg: RunConfig, run: Run) -> None:
    model = cfg.model.build()
    names = list(model.names)
    n1, N = model.n_obs, model.dim
    times = sorted(set(float(t) for t in cfg.t_eval))
    with run.timed("reference"):
        oracle = _oracle(cfg, model, [t for t in times if t > 0])
    ens = Ensemble.at_point(model, cfg.L)
    fst = None
    summary = {}
    for t in times:
        with run.timed("simulate_filter"):
            if t > ens.t:
                _, _, ens, fst = simulate_and_filter(model, ens, t, cfg.dt, rng=cfg.seed, filter_init=fst,
                                                     record=False, psd_floor=cfg.filter.psd_floor,
                                                     cap=cfg.blowup_cap, threads=cfg.threads)
            if fst is None:
                fst = FilterState(ens.uII.copy(), np.zeros((cfg.L, model.n_hidden, model.n_hidden)))
        tag = _tag(t)
        truth = oracle.get(t)
        with run.timed("estimate"):
            bw = resolve_bandwidth(cfg.bandwidth, ens.uI, cfg.L)
            mix = build_hybrid(ens.uI, fst, bw, delta=cfg.filter.delta, eig_floor=cfg.filter.eig_floor)
            run.degenerate[tag] = int(np.count_nonzero(mix.degenerate))
            estimators = {"hybrid": mix.as_gaussian_mixture()}
            info = {"bandwidth": bw.as_dict(), "degenerate": run.degenerate[tag], "panels": {}}
            if "direct" in cfg.estimators:
                bwd = resolve_bandwidth(cfg.bandwidth, ens.states, cfg.L)
                estimators["direct"] = direct_kde(ens.states, bwd)
                info["bandwidth_direct"] = bwd.as_dict()
            axes = _axes_for(truth if truth is not None else ens.states, cfg.grid.n_points, cfg.grid.n_std)
            panels = [(i, j) for i, j in _panel_pairs(names)] + [(k,) for k in range(n1, N)]
            for dims in panels:
                lab = "_".join(names[d] for d in dims)
                kind = "density" if len(dims) == 2 else "marginal"
                ax = [axes[d] for d in dims]
                ref = None
                if truth is not None:
                    ref = mc_reference(truth[:, list(dims)], ax, names=[names[d] for d in dims])
                    ref.to_csv(run.path(f"{kind}_truth_{tag}_{lab}.csv"))
                for est_name, gm in estimators.items():
                    g = eval_on_grid(gm.marginal(list(dims)), ax, [names[d] for d in dims])
                    g.to_csv(run.path(f"{kind}_{est_name}_{tag}_{lab}.csv"))
                    entry = {"mass": g.mass}
                    if ref is not None:
                        entry["l2_error_sq"] = g.l2_distance_sq(ref)
                    info["panels"][f"{est_name}:{lab}"] = entry
            hidden = names[n1:]
            rows = []
            for i in range(cfg.L):
                rows.append([int(ens.sample_ids[i]), *fst.mean[i], *np.diagonal(fst.cov[i]), *ens.uII[i]])
            _write_rows(run.path(f"posterior_{tag}.csv"),
                        ["sample", *(f"mean_{h}" for h in hidden), *(f"var_{h}" for h in hidden),
                         *(f"sample_{h}" for h in hidden)], rows)
            mix.to_csv(run.path(f"mixture_{tag}.csv"), names[:n1], hidden)
            if cfg.projection is not None:
                proj = Projection(np.asarray(cfg.projection, dtype=float))
                mix.project(proj).to_csv(run.path(f"mixture_projected_{tag}.csv"), names[:n1])
        summary[tag] = info
    if run.degenerate and any(v > 0 for v in run.degenerate.values()):
        run.warnings.append("degenerate posterior covariances regularized with delta*I")
    if times:
        write_json({"times": times, "per_time": summary}, run.path("estimate.json"))


def cmd_compare(cfg: RunConfig, run: Run) -> None:
    model = cfg.model.build()
    cc = cfg.compare
    t = float(cc.t_eval)
    n1, N = model.n_obs, model.dim
    if cfg.reference.kind != "mc":
        raise ConfigError("compare needs a Monte Carlo reference (reference.kind = 'mc')")
    with run.timed("reference"):
        truth = _oracle(cfg, model, [t])[t]
        axes = _axes_for(truth, cc.joint_points, cfg.grid.n_std)
        ref = mc_reference(truth, axes, names=model.names)
        hax = _axes_for(truth[:, n1:], cc.hidden_points, cfg.grid.n_std)
        ref_h = mc_reference(truth[:, n1:], hax, names=model.names[n1:])
    c = cfg.bandwidth.c
    with run.timed("scaling"):
        res = mise_scaling_experiment(
            model, cc.Ls, t, ref, cc.n_repeats, cfg.dt, seed=cfg.seed, reference_hidden=ref_h,
            c_obs=None if c is None else np.resize(np.asarray(c, float), n1),
            c_joint=None if c is None else np.resize(np.asarray(c, float), N),
            kappa=cfg.bandwidth.kappa, estimators=cc.estimators, delta=cfg.filter.delta,
            threads=cfg.threads)
    res.to_csv(run.path("scaling.csv"))
    expected = {"hybrid": -4.0 / (4 + n1), "direct": -4.0 / (4 + N), "hidden": -1.0}
    out = {"slopes": res.slopes, "expected": {e: expected[e] for e in res.slopes},
           "slope_tol": cc.slope_tol, "settings": res.settings, "bound_checks": {}}
    for e, slope in res.slopes.items():
        ok = abs(slope - expected[e]) <= cc.slope_tol
        run.checks[f"slope_{e}"] = bool(ok)
        checks = []
        for L, rep, b in zip(res.Ls, res.reports[e], res.bounds[e]):
            if e == "hidden":
                lhs, se = rep.mise, rep.mise_stderr
            else:
                lhs, se = rep.variance_unbiased, rep.variance_stderr
            holds = bool(lhs <= b + 3.0 * se)
            checks.append({"L": L, "empirical": lhs, "stderr": se, "bound": b, "holds": holds})
        out["bound_checks"][e] = checks
        run.checks[f"variance_bound_{e}"] = all(c["holds"] for c in checks)
    write_json(out, run.path("compare.json"))


def cmd_diagnose(cfg: RunConfig, run: Run) -> None:
    model = cfg.model.build()
    dc = cfg.diagnose
    s = int(dc.sample)
    T = max(max(dc.checkpoints), dc.horizon)
    init = Ensemble.at_point(model, s + 1)
    with run.timed("simulate_filter"):
        store, frun, _, _ = simulate_and_filter(model, init, T, cfg.dt, store_stride=1, rng=cfg.seed,
                                                 psd_floor=cfg.filter.psd_floor, cap=cfg.blowup_cap,
                                                 eig_floor_report=cfg.filter.eig_floor,
                                                 threads=cfg.threads)
    path = store.uI[:, s, :]
    run.degenerate["diagnosed_sample"] = int(frun.degenerate[s])
    q = model.quadratic
    consts = energy_model_constants(q, dc.v, dc.m) if q is not None else {"applicable": False,
                                                                           "Dc": float("inf")}
    report = {"constants": consts, "checkpoints": [], "notes": []}
    if not consts.get("applicable", False):
        report["notes"].append("controllability constants not applicable; bounds are vacuous")
        run.warnings.append("vacuous bounds: controllability constants not applicable")
    if model.n_hidden == 1:
        report["notes"].append("N_II = 1 is outside the stated hypothesis of the covariance bounds")
    if q is not None:
        report["energy_conservation"] = check_energy_conservation(q)
        report["dissipativity"] = check_dissipativity(model)
        run.checks["energy_conservation"] = report["energy_conservation"]["max_violation"] <= 1e-12
    gram = []
    with run.timed("bounds"):
        for t in sorted(float(x) for x in dc.checkpoints):
            k = frun.index_of(t)
            R = frun.cov[k, s]
            g = controllability_gramian(model, path, t - dc.v, t, cfg.dt, constants=consts)
            gram.append(g.as_dict())
            lo = r2_lower_bound(path, t, cfg.dt, dc.v, dc.m, consts["Dc"], consts.get("sigma_II_minus", 0.0),
                                consts.get("sigma_II_plus", 0.0), R=R, n_hidden=model.n_hidden)
            hi = r2_upper_bound(model, path, t, cfg.dt, dc.v, dc.m, consts["Dc"],
                                consts.get("sigma_II_plus", 0.0), R=R)
            report["checkpoints"].append({"t": t, "lower": lo.as_dict(), "upper": hi.as_dict(),
                                          "gramian_within_bracket": g.within_bracket})
    applicable = [c for c in report["checkpoints"] for b in (c["lower"], c["upper"]) if b["applicable"]]
    if applicable:
        run.checks["r2_lower_bound"] = all(c["lower"]["holds"] for c in report["checkpoints"]
                                           if c["lower"]["applicable"])
        run.checks["r2_upper_bound"] = all(c["upper"]["holds"] for c in report["checkpoints"]
                                           if c["upper"]["applicable"])
    write_json({"gramians": gram}, run.path("gramian.json"))
    with run.timed("contraction"):
        n2 = model.n_hidden
        try:
            con = riccati_contraction_experiment(model, path, dc.R0[0] * np.eye(n2), dc.R0[1] * np.eye(n2),
                                                 cfg.dt, horizon=dc.horizon)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    con.to_csv(run.path("contraction.csv"))
    ratio = float(con.distance[-1] / con.distance[0])
    report["contraction"] = {"ratio": ratio, "horizon": float(con.times[-1]),
                             "fitted_rate": con.fitted_rate(), "tolerance": dc.contraction_tol}
    run.checks["contraction"] = bool(ratio < dc.contraction_tol)
    write_json(report, run.path("bounds.json"))


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "compare": cmd_compare,
            "diagnose": cmd_diagnose}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridpdf", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=f"run the {name} stage")
        sp.add_argument("--config", type=Path, help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dotted path, JSON value); repeatable")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--threads", type=int, help="worker threads for the compiled kernels")
        sp.add_argument("--check", action="store_true", help="exit with status 4 if any check fails")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set, args.seed, args.threads, args.out)
    except (ConfigError, ConfigurationError, ModelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _backend.set_threads(cfg.threads)
    try:
        run = Run(args.command, cfg)
    except OSError as exc:
        print(f"config error: cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](cfg, run)
    except BlowUpError as exc:
        run.warnings.append(f"blow-up: {exc}")
        run.write_manifest("blow-up")
        print(f"numerical blow-up: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    except (ConfigError, ConfigurationError, ModelError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        run.warnings.append(f"config error: {exc}")
        run.write_manifest("config-error")
        return EXIT_CONFIG
    failed = sorted(k for k, v in run.checks.items() if not v)
    run.write_manifest("ok" if not failed else "checks-failed")
    for k in failed:
        print(f"check failed: {k}", file=sys.stderr)
    if args.check and failed:
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
