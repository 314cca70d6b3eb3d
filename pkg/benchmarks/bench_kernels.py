"""Compare the compiled kernels with the numpy fallback.

Times the three hot paths through the public API under each backend:
normal draws, ensemble simulation with the filter fused in, and Gaussian
mixture evaluation.  Also checks that both backends agree numerically.

    python3 benchmarks/bench_kernels.py [--L 2000] [--steps 200] [--repeat 3] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np

from hybridpdf import _backend
from hybridpdf.cg_filter import simulate_and_filter
from hybridpdf.density import GaussianMixture
from hybridpdf.model import triad_model, triad_params
from hybridpdf.sde_sim import Ensemble, RngPolicy


def best_of(fn, repeat):
    times, out = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(L, steps):
    model = triad_model(triad_params("I", "triad_modified"))
    dt = 1e-3
    rng = np.random.default_rng(0)
    means = rng.standard_normal((L, 3))
    covs = np.broadcast_to(0.1 * np.eye(3), (L, 3, 3)).copy()
    mix = GaussianMixture(means, covs)
    pts = rng.standard_normal((20_000, 3))
    ids = np.arange(L)

    def normals():
        return RngPolicy(1).normals(ids, 0, 64)

    def sim_filter():
        _, _, fin, fst = simulate_and_filter(model, Ensemble.at_point(model, L), steps * dt, dt, rng=3, record=False)
        return np.concatenate([fin.states.ravel(), fst.cov.ravel()])

    def mixture():
        return mix.logpdf(pts)

    return {
        "philox_normals": (normals, L * 64),
        "advance_quadratic": (sim_filter, L * steps),
        "mixture_logpdf": (mixture, pts.shape[0] * L),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--L", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)
    if not _backend.compiled_available():
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")

    rows = []
    for name, (fn, units) in cases(args.L, args.steps).items():
        res = {}
        for which in ("compiled", "python"):
            with _backend.use_backend(which):
                fn()  # warm up
                res[which] = best_of(fn, args.repeat)
        diff = float(np.max(np.abs(res["compiled"][1] - res["python"][1])))
        tc, tp = res["compiled"][0], res["python"][0]
        rows.append({"kernel": name, "compiled_s": tc, "python_s": tp, "speedup": tp / tc,
                     "ns_per_unit_compiled": 1e9 * tc / units, "max_abs_diff": diff})

    print(f"{'kernel':<20}{'compiled [s]':>14}{'python [s]':>12}{'speedup':>10}{'ns/unit':>10}{'max|diff|':>12}")
    for r in rows:
        print(f"{r['kernel']:<20}{r['compiled_s']:>14.4f}{r['python_s']:>12.4f}{r['speedup']:>10.1f}"
              f"{r['ns_per_unit_compiled']:>10.1f}{r['max_abs_diff']:>12.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
