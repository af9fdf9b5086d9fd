"""Command line entry points."""
from __future__ import annotations

import argparse
import json
import logging
import sys


def _mesh_info(args) -> int:
    from .mesh import check_mesh_conditions, classify_vertices, read_mesh, xi_mesh

    m = read_mesh(args.mesh)
    c = classify_vertices(m)
    cond = check_mesh_conditions(m, c)
    print(f"vertices: {m.n_vertices}")
    print(f"triangles: {m.n_triangles}")
    print(f"boundary edges: {len(m.boundary_edges)}")
    print(f"enclosed: {m.is_enclosed}")
    print(f"singular vertices: {len(c.singular)}" + (f" {c.singular}" if c.singular else ""))
    print(f"xi_T: {xi_mesh(c)!r}")
    print("conditions: " + " ".join(f"{k}={v}" for k, v in cond.items()))
    if args.verbose:
        for a in range(m.n_vertices):
            v = c[a]
            print(f"  vertex {a}: {v.cls.value} fan={list(v.fan)} singular={v.is_singular} xi={v.xi!r}")
    return 0


def _infsup(args) -> int:
    from .mesh import read_mesh
    from .stability import infsup_general_p_upper, infsup_p2

    m = read_mesh(args.mesh)
    if args.p == 2.0:
        rep = infsup_p2(m, args.N, seminorm=args.seminorm)
    else:
        rep = infsup_general_p_upper(m, args.N, args.p, starts=args.starts, seed=args.seed)
    print("kind,N,p,value,xi_T,iterations,flags")
    print(rep.csv_row())
    return 0


def _projnorm(args) -> int:
    from .mesh import read_mesh
    from .stability import projection_lp_norm

    m = read_mesh(args.patch) if args.patch else None
    if m is not None and args.vertex is None:
        from .mesh import classify_vertices

        sing = classify_vertices(m).singular
        if not sing:
            print("patch mesh has no singular vertex", file=sys.stderr)
            return 2
        args.vertex = sing[0]
    rep = projection_lp_norm(args.N, args.p, m, args.vertex, seed=args.seed)
    print("kind,N,p,value,xi_T,iterations,flags")
    print(rep.csv_row())
    return 0


def _jacobi_decay(args) -> int:
    from .acceptance import zeta_norms
    from .polytools import fit_decay_exponent

    Ns = list(range(max(2 * args.m + 1, 8), args.Nmax + 1))
    norms = zeta_norms(args.m, args.p, Ns, alpha=args.alpha)
    print("N,norm")
    for N, v in zip(Ns, norms):
        print(f"{N},{v!r}")
    print(f"# fitted exponent: {fit_decay_exponent(Ns, norms)!r}")
    return 0


def _rank_check(args) -> int:
    from .femspace import verify_div_surjectivity
    from .mesh import read_mesh

    r = verify_div_surjectivity(read_mesh(args.mesh), args.N)
    print(f"rank B: {r['rank_B']}")
    print(f"dim DG: {r['dim_DG']}")
    print(f"dim Q (constrained): {r['dim_Q']}")
    print(f"rank deficiency: {r['deficiency']}")
    print(f"rank equals constrained dimension: {r['equal']}")
    return 0 if r["equal"] else 1


def _pstokes(args) -> int:
    from .pstokes import PStokesConfig, run_pstokes

    cfg = PStokesConfig.from_json(args.config)
    res, metrics, prob = run_pstokes(cfg)
    out = {"config": cfg.to_dict(), "newton_iterations": res.newton_iterations,
           "residual_history": res.residual_history, "divergence_residual": res.divergence_residual,
           "dim_V": prob.V.dim, "dim_Q": prob.Q.dim, **metrics}
    print(json.dumps(out, indent=2))
    return 0


def _study(args) -> int:
    from .experiments import StudyConfig, emit_csv, emit_svg_plot, run_convergence_study

    cfg = StudyConfig.from_json(args.config)
    if args.no_timing:
        cfg = StudyConfig.from_dict({**cfg.__dict__, "record_timing": False})
    recs = run_convergence_study(cfg)
    emit_csv(recs, args.out)
    if args.svg:
        emit_svg_plot(recs, args.svg, metric=args.metric)
    print(f"wrote {len(recs)} rows to {args.out}")
    return 0


def _accept(args) -> int:
    from .acceptance import run_all

    sel = [int(s) for s in args.only.split(",")] if args.only else None
    results = run_all(sel)
    for r in results:
        print(r.line(), flush=True)
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} criteria passed")
    return 0 if passed == len(results) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="svlab", description=__doc__)
    ap.add_argument("--seed", type=int, default=42, help="seed for all randomized steps")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("mesh-info", help="vertex classification, xi_T and mesh conditions")
    s.add_argument("mesh")
    s.set_defaults(func=_mesh_info)

    s = sub.add_parser("infsup", help="inf-sup constant (exact at p=2, upper estimate otherwise)")
    s.add_argument("--mesh", required=True)
    s.add_argument("--N", type=int, default=4)
    s.add_argument("--p", type=float, default=2.0)
    s.add_argument("--starts", type=int, default=4)
    s.add_argument("--seminorm", action="store_true")
    s.set_defaults(func=_infsup)

    s = sub.add_parser("projnorm", help="L^p norm of the L^2 projection onto DG^N")
    s.add_argument("--N", type=int, required=True)
    s.add_argument("--p", type=float, default=float("inf"))
    s.add_argument("--patch", help="mesh file whose singular-vertex patch is used")
    s.add_argument("--vertex", type=int)
    s.set_defaults(func=_projnorm)

    s = sub.add_parser("jacobi-decay", help="L^p norms of the decaying polynomials and fitted exponent")
    s.add_argument("--m", type=int, default=1)
    s.add_argument("--p", type=float, default=2.0)
    s.add_argument("--Nmax", type=int, default=64)
    s.add_argument("--alpha", type=float, default=4.0)
    s.set_defaults(func=_jacobi_decay)

    s = sub.add_parser("rank-check", help="rank of the divergence against the constrained pressure space")
    s.add_argument("--mesh", required=True)
    s.add_argument("--N", type=int, default=4)
    s.set_defaults(func=_rank_check)

    s = sub.add_parser("pstokes", help="solve one p-Stokes problem from a JSON config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=_pstokes)

    s = sub.add_parser("study", help="convergence study to CSV (and optionally SVG)")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--svg")
    s.add_argument("--metric", default="e_F")
    s.add_argument("--no-timing", action="store_true", help="write 0 for wall times (byte-stable output)")
    s.set_defaults(func=_study)

    s = sub.add_parser("accept", help="run the acceptance criteria; exit status 0 iff all pass")
    s.add_argument("--only", help="comma-separated criterion numbers")
    s.set_defaults(func=_accept)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
