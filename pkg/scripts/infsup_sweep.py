#!/usr/bin/env python3
"""Inf-sup constants at p=2: degree sweep on the initial mesh and the
near-singular crossing family (enclosed flow), as CSV rows."""
import argparse

from svlab.mesh import crossing_square, unit_square_initial
from svlab.stability import CSV_HEADER, infsup_general_p_upper, infsup_p2


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--N", type=int, nargs="+", default=[4, 5, 6, 7, 8])
    ap.add_argument("--deltas", type=float, nargs="+", default=[0.2, 0.1, 0.05])
    ap.add_argument("--general-p", type=float, nargs="*", default=[],
                    help="also report upper estimates at these p on the initial mesh")
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args(argv)
    print(CSV_HEADER + ",mesh")
    t0 = unit_square_initial()
    for N in args.N:
        print(infsup_p2(t0, N).csv_row() + ",t0", flush=True)
        for p in args.general_p:
            print(infsup_general_p_upper(t0, N, p, seed=args.seed).csv_row() + ",t0", flush=True)
    for d in args.deltas:
        print(infsup_p2(crossing_square(d, enclosed=True), 4).csv_row() + f",crossing_delta={d!r}", flush=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
