#!/usr/bin/env python3
"""Time one conditional factorization and a full grid fit at several data sizes.

    python3 scripts/scaling_benchmark.py --sizes 5000 10000 20000
"""

import argparse
import math
import os
import time

import numpy as np

from vo2lgm.dataset import build_frame
from vo2lgm.inference import InferenceConfig, conditional, fit
from vo2lgm.lgm import HyperParams
from vo2lgm.simulate import GenerativeConfig, simulate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[5000, 10_000, 20_000])
    ap.add_argument("--patients", type=int, default=20)
    ap.add_argument("--sessions", type=int, default=5)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--full-fit", action="store_true", help="also run the full grid fit at each size")
    ap.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    a = ap.parse_args()

    theta = HyperParams(38.63, 44.30, 46.75, 0.09)
    per_point = []
    print(f"{'n':>8s} {'latent dim':>10s} {'per point [s]':>14s} {'full fit [s]':>12s}")
    for n in a.sizes:
        per_session = max(1, n // (a.patients * a.sessions))
        ds, _ = simulate(GenerativeConfig(n_patients=a.patients, sessions_per_patient=a.sessions,
                                          breaths_per_session=per_session, seed=1))
        fr = build_frame(ds)
        conditional(theta, fr)
        best = math.inf
        for _ in range(a.repeats):
            t = time.perf_counter()
            cg = conditional(theta, fr)
            best = min(best, time.perf_counter() - t)
        per_point.append(best)
        full = ""
        if a.full_fit:
            t = time.perf_counter()
            fit(fr, config=InferenceConfig(n_jobs=a.jobs))
            full = f"{time.perf_counter() - t:.1f}"
        print(f"{fr.n:>8d} {cg.layout.dim:>10d} {best:>14.4f} {full:>12s}")
    if len(a.sizes) > 1:
        slope = np.polyfit(np.log(a.sizes), np.log(per_point), 1)[0]
        print(f"log-log slope of per-point time: {slope:.2f}")


if __name__ == "__main__":
    main()
