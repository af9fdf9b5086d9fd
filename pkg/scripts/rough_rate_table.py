#!/usr/bin/env python3
"""Algebraic rates for the rough manufactured solution.

Runs the h-version (N=4, levels 0..L of the initial mesh) for each p and,
optionally, the p-version on one refinement, writes one CSV per run and
prints the fitted gamma per metric (error ~ M^{-gamma/2}).
"""
import argparse
import logging
from pathlib import Path

from svlab.experiments import METRICS, FitError, StudyConfig, emit_csv, fit_rate, run_convergence_study


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--p", type=float, nargs="+", default=[1.5, 2.0, 3.0])
    ap.add_argument("--levels", type=int, default=4)
    ap.add_argument("--p-version", action="store_true", help="also run N=4..N_max on one refinement")
    ap.add_argument("--N-max", type=int, default=12)
    ap.add_argument("--out", type=Path, default=Path("results/rough"))
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    args.out.mkdir(parents=True, exist_ok=True)

    runs = [(f"h_p{p:g}", StudyConfig(method="h", solution="rough", p=p, N=4, levels=args.levels,
                                        record_timing=False), 3) for p in args.p]
    if args.p_version:
        runs += [(f"p_p{p:g}", StudyConfig(method="p", solution="rough", p=p, N=4, N_max=args.N_max,
                                             base_refinements=1, record_timing=False), None) for p in args.p]
    print("run," + ",".join(METRICS))
    for name, cfg, window in runs:
        recs = run_convergence_study(cfg)
        emit_csv(recs, args.out / f"{name}.csv")
        gammas = []
        for metric in METRICS:
            try:
                gammas.append(f"{fit_rate(recs, metric, window).gamma:.3f}")
            except FitError:
                gammas.append("nan")
        print(f"{name}," + ",".join(gammas), flush=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
