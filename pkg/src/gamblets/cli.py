"""Command-line interface.

Exit codes: 0 success, 1 runtime or solver failure, 2 usage error.
"""

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import frozen_C_a
from .diagnostics import (
    DiagnosticReport,
    conditioning,
    decay_profile,
    error_curve,
    fit_poincare,
    poincare_constants,
    posterior_cov_diag,
    subband_energy,
)
from .errors import GambletError
from .exact import export_hierarchy, gamblet_solve, gamblet_transform
from .fast import (
    LevelGraphDistance,
    ball_growth_exponent,
    calibrate_C_a,
    default_schedule,
    fast_gamblet_solve,
    fast_gamblet_transform,
    full_radius_schedule,
    uniform_schedule,
)
from .hierarchy import build_grid_tree, contiguous_tree, haar_operators
from .io_utils import dump_json
from .problems import (
    assemble_fem,
    coefficient_field,
    graph_laplacian,
    load_vector,
    read_edge_list,
    rhs_dirac,
    rhs_smooth,
)
from .sparse_core import mm_read, mm_read_vector, mm_write, mm_write_vector

CHECKS = ("conditioning", "decay", "energy", "poincare", "posterior")
SEED = 0
OUT_ENV = "GAMBLETS_OUT"


class UsageError(Exception):
    pass


def _default_out():
    return os.environ.get(OUT_ENV, "gamblets_out")


def _config(args):
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}


def _manifest_base(args):
    return {"version": __version__, "seed": SEED, "config": _config(args)}


def _float_list(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


# --------------------------------------------------------------------------
# tree / operator selection
# --------------------------------------------------------------------------


def _problem_meta(matrix_path):
    meta = Path(matrix_path).with_name("problem.json")
    if meta.exists():
        return json.loads(meta.read_text())
    return {}


def _build_ops(N, args, meta):
    """Haar operators over a grid tree when N is a full grid, else over a contiguous binary tree."""
    dim = args.dim or meta.get("dim")
    branch = args.branch or meta.get("branch") or 2
    q = args.q or meta.get("q")
    if dim:
        if q is None:
            q = round(math.log(N, branch**dim))
        if branch ** (dim * q) == N:
            return haar_operators(build_grid_tree(dim, q, branch))
        raise UsageError(f"a {dim}-D grid tree with branch {branch} and q={q} does not have {N} leaves")
    for d in (2, 1):
        qq = round(math.log(N, branch**d)) if N > 1 else 1
        if qq >= 1 and branch ** (d * qq) == N:
            return haar_operators(build_grid_tree(d, qq, branch))
    return haar_operators(contiguous_tree(N, branch=branch))


def _dimension(A, ops):
    """Geometric dimension of a grid tree, else the fitted ball-growth exponent."""
    if ops.tree.dim is not None:
        return float(ops.tree.dim)
    return ball_growth_exponent(LevelGraphDistance(A, ops.tree, ops.q))


def _schedule(args, q, N, d=2.0):
    if args.full_radius:
        return full_radius_schedule(q, N, epsilon=args.epsilon, d=d)
    C_a = args.C_a if args.C_a is not None else frozen_C_a(args.epsilon)
    if args.rho:
        rhos = _int_list(args.rho)
        if len(rhos) == 1:
            return uniform_schedule(q, rhos[0], epsilon=args.epsilon, H=args.H, C_a=C_a, d=d)
        if len(rhos) != q:
            raise UsageError(f"--rho needs 1 or {q} values")
        sched = default_schedule(args.H, q, args.epsilon, C_a, d=d)
        sched.rho = {k: r for k, r in enumerate(rhos, start=1)}
        return sched
    return default_schedule(args.H, q, args.epsilon, C_a, d=d)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen(args):
    out = Path(args.out or _default_out())
    if args.kind == "fem2d":
        if args.q is None:
            raise UsageError("--kind fem2d needs --q")
        a = coefficient_field(args.q, factors=args.factors, amplitude=args.amplitude)
        prob = assemble_fem(args.q, a)
        out.mkdir(parents=True, exist_ok=True)
        mm_write(out / "A.mtx", prob.A)
        mm_write_vector(out / "b_smooth.mtx", load_vector(prob, rhs_smooth(prob)))
        mm_write_vector(out / "b_dirac.mtx", load_vector(prob, rhs_dirac(prob)))
        mm_write(out / "coeff.mtx", a)
        meta = {
            "kind": "fem2d",
            "q": args.q,
            "dim": 2,
            "branch": 2,
            "N": prob.N,
            "ordering": "row-major interior nodes, x fastest: (j-1)*2^q + (i-1)",
            "center_index": prob.center_index(),
            "contrast": prob.contrast(),
            "rhs": "load vectors (mass matrix times nodal coefficients)",
        }
    else:
        if args.edges is None:
            raise UsageError("--kind graph needs --edges")
        edges, weights = read_edge_list(args.edges)
        A = graph_laplacian(edges, weights, reg=args.reg)
        out.mkdir(parents=True, exist_ok=True)
        mm_write(out / "A.mtx", A)
        mm_write_vector(out / "b_ones.mtx", np.ones(A.shape[0]))
        meta = {"kind": "graph", "N": A.shape[0], "reg": args.reg, "edges": len(edges)}
    meta.update(_manifest_base(args))
    dump_json(out / "problem.json", meta)
    return 0


def _load_system(args):
    A = mm_read(args.matrix)
    meta = _problem_meta(args.matrix)
    ops = _build_ops(A.shape[0], args, meta)
    return A, ops


def cmd_solve(args):
    out = Path(args.out or _default_out())
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest_base(args)
    manifest["mode"] = args.mode
    try:
        A, ops = _load_system(args)
        b = mm_read_vector(args.rhs)
        t0 = time.perf_counter()
        if args.mode == "exact":
            h = gamblet_transform(A, ops, tol=args.tol)
            t1 = time.perf_counter()
            s = gamblet_solve(h, b)
            manifest["tolerances"] = {"inner": args.tol}
        else:
            sched = _schedule(args, ops.q, A.shape[0], d=_dimension(A, ops))
            h = fast_gamblet_transform(A, ops, sched)
            t1 = time.perf_counter()
            s = gamblet_solve(h, b)
            manifest["schedule"] = sched.to_dict()
            manifest["tolerances"] = {"subband": sched.subband_tol, "coarse": sched.coarse_tol, "ball": sched.ball_tol}
        t2 = time.perf_counter()
    except UsageError:
        raise
    except (GambletError, OSError, ValueError) as exc:
        manifest["error"] = {"type": type(exc).__name__, "message": str(exc), **_error_fields(exc)}
        dump_json(out / "manifest.json", manifest)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    mm_write_vector(out / "u.mtx", s.u)
    sub = out / "subbands"
    sub.mkdir(exist_ok=True)
    for k, v in s.v.items():
        mm_write_vector(sub / f"v_{k}.mtx", v)
    r = np.asarray(A @ s.u).ravel() - b
    bn = np.linalg.norm(b)
    manifest.update(
        {
            "q": ops.q,
            "N": int(A.shape[0]),
            "residual": float(np.linalg.norm(r) / bn) if bn > 0 else float(np.linalg.norm(r)),
            "timings": {"transform": t1 - t0, "solve": t2 - t1},
            "nnz": h.level_nnz(),
            "total_nnz": h.total_nnz(),
        }
    )
    dump_json(out / "manifest.json", manifest)
    if args.export:
        export_hierarchy(h, out / "hierarchy", extra={"config": _config(args)})
    return 0


def _error_fields(exc):
    return {k: getattr(exc, k) for k in ("level", "residual", "index", "pivot", "line") if getattr(exc, k, None) is not None}


def _report_conditioning(h, rep):
    cond = conditioning(h)
    rep.metrics["cond_A_1"] = cond[1]
    for k in range(2, h.q + 1):
        if k in cond:
            rep.metrics[f"cond_B_{k}"] = cond[k]
    rep.notes["cond_B_k"] = "condition numbers of the subband stiffness matrices, expected bounded in k"


def _report_decay(h, A, rep):
    slopes = []
    for k in range(2, h.q):
        dist = LevelGraphDistance(A, h.ops.tree, k)
        n = h.ops.tree.size(k)
        rows = np.unique(np.linspace(0, n - 1, min(n, 8)).astype(int))
        for which in ("psi", "stiffness"):
            prof = [decay_profile(h, dist, k, int(i), which) for i in rows]
            fits = [p.slope for p in prof if np.isfinite(p.slope)]
            if fits:
                rep.metrics[f"decay_slope_{which}_{k}"] = float(np.mean(fits))
                slopes.extend(fits)
            mid = prof[len(prof) // 2]
            rep.curves[f"decay_{which}_{k}_row{int(rows[len(rows) // 2])}"] = list(zip(mid.distance, mid.magnitude))
    if slopes:
        rep.metrics["decay_slope_mean"] = float(np.mean(slopes))
    rep.notes["decay_slope"] = "least-squares slope of log max magnitude against level graph distance"


def _report_energy(h, A, b, rep):
    s = gamblet_solve(h, b)
    energies, shares = subband_energy(s, A)
    for k in energies:
        rep.metrics[f"energy_{k}"] = energies[k]
        rep.metrics[f"energy_share_{k}"] = shares[k]
    rep.curves["energy_share"] = sorted(shares.items())
    ec = error_curve(h, b)
    rep.curves["error_curve"] = list(enumerate(ec, start=1))
    rep.notes["energy_share"] = "fraction of |u|_A^2 carried by each subband"


def _report_poincare(A, ops, rep):
    from scipy.linalg import eigvalsh

    from .sparse_core import to_dense

    pc = poincare_constants(A, ops)
    lam = float(eigvalsh(to_dense(A))[0])
    H, C = fit_poincare(pc, lam)
    rep.metrics["poincare_H"] = H
    rep.metrics["poincare_C"] = C
    rep.curves["poincare_inf"] = [(k, v[0]) for k, v in sorted(pc.items())]
    rep.curves["poincare_sup"] = [(k, v[1]) for k, v in sorted(pc.items())]
    rep.notes["poincare_H"] = "common-slope fit of log constants against level"


def _report_posterior(h, rep):
    traces = []
    for k in range(1, h.q + 1):
        traces.append((k, float(np.sum(posterior_cov_diag(h, k)))))
    rep.curves["posterior_trace"] = traces
    rep.metrics["posterior_trace_1"] = traces[0][1]
    rep.notes["posterior_trace"] = "trace of the conditional covariance after level-k measurements"


def cmd_diagnose(args):
    checks = [c.strip() for c in (args.checks or "").split(",") if c.strip()]
    if not checks:
        raise UsageError("--checks must name at least one check")
    bad = [c for c in checks if c not in CHECKS]
    if bad:
        raise UsageError(f"unknown check(s): {', '.join(bad)}; choose from {', '.join(CHECKS)}")
    out = Path(args.out or Path(_default_out()) / "report.json")
    rep = DiagnosticReport()
    try:
        A, ops = _load_system(args)
        h = gamblet_transform(A, ops)
        if "conditioning" in checks:
            _report_conditioning(h, rep)
        if "decay" in checks:
            _report_decay(h, A, rep)
        if "energy" in checks:
            if args.rhs:
                b = mm_read_vector(args.rhs)
            else:
                b = np.ones(A.shape[0])
            _report_energy(h, A, b, rep)
        if "poincare" in checks:
            _report_poincare(A, ops, rep)
        if "posterior" in checks:
            _report_posterior(h, rep)
    except (GambletError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    rep.metrics["seed"] = SEED
    out.parent.mkdir(parents=True, exist_ok=True)
    d = rep.to_dict()
    d["config"] = _config(args)
    d["version"] = __version__
    dump_json(out, d)
    return 0


def cmd_calibrate(args):
    prob = assemble_fem(args.q)
    ops = haar_operators(build_grid_tree(2, args.q))
    rhs = [load_vector(prob, rhs_smooth(prob)), load_vector(prob, rhs_dirac(prob))]
    result = {"q": args.q, "H": args.H, "start": args.start, "C_a": {}, "history": {}}
    try:
        for eps in _float_list(args.epsilon):
            C_a, hist = calibrate_C_a(prob.A, ops, rhs, eps, H=args.H, start=args.start)
            result["C_a"][repr(eps)] = C_a
            result["history"][repr(eps)] = hist
            print(f"epsilon={eps:g}: C_a={C_a:g}")
    except GambletError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    result.update(_manifest_base(args))
    if args.out:
        dump_json(args.out, result)
    return 0


def cmd_bench(args):
    rows = []
    try:
        for q in _int_list(args.q_list):
            prob = assemble_fem(q)
            ops = haar_operators(build_grid_tree(2, q))
            b = load_vector(prob, rhs_smooth(prob))
            C_a = args.C_a if args.C_a is not None else frozen_C_a(args.epsilon)
            sched = default_schedule(args.H, q, args.epsilon, C_a)
            t0 = time.perf_counter()
            s, h = fast_gamblet_solve(prob.A, ops, b, sched)
            dt = time.perf_counter() - t0
            rows.append({"q": q, "N": prob.N, "seconds": dt, "nnz": h.total_nnz()})
            print(f"q={q} N={prob.N} time={dt:.3f}s nnz={h.total_nnz()}")
    except GambletError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    result = {"runs": rows}
    if len(rows) >= 2:
        logN = np.log([r["N"] for r in rows])
        result["runtime_exponent"] = float(np.polyfit(logN, np.log([r["seconds"] for r in rows]), 1)[0])
        result["nnz_exponent"] = float(np.polyfit(logN, np.log([r["nnz"] for r in rows]), 1)[0])
        print(f"runtime exponent {result['runtime_exponent']:.3f}, nnz exponent {result['nnz_exponent']:.3f}")
    result.update(_manifest_base(args))
    if args.out:
        dump_json(args.out, result)
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_tree_flags(p):
    p.add_argument("--q", type=int, help="tree depth (default: from problem.json or inferred)")
    p.add_argument("--dim", type=int, choices=(1, 2, 3), help="grid dimension of the tree")
    p.add_argument("--branch", type=int, help="children per axis (default 2)")


def _add_schedule_flags(p):
    p.add_argument("--H", type=float, default=0.5, help="scale ratio between levels (default 0.5)")
    p.add_argument("--epsilon", type=float, default=1e-3, help="target accuracy of the fast solve")
    p.add_argument("--C-a", dest="C_a", type=float, help="localization constant (default: frozen calibration)")


def build_parser():
    parser = argparse.ArgumentParser(prog="gamblets", description="Gamblet transform solvers and diagnostics.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=1, help="thread-count hint (recorded in manifests)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-problem", help="write a test problem")
    p.add_argument("--kind", choices=("fem2d", "graph"), required=True)
    p.add_argument("--q", type=int)
    p.add_argument("--out")
    p.add_argument("--factors", type=int, default=7, help="number of coefficient factors (default 7)")
    p.add_argument("--amplitude", type=float, default=0.2, help="coefficient oscillation amplitude")
    p.add_argument("--edges", help="edge list file: 'i j [weight]' per line")
    p.add_argument("--reg", type=float, default=0.0, help="diagonal regularization of the graph Laplacian")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("solve", help="solve A u = b by the exact or fast transform")
    p.add_argument("--matrix", required=True)
    p.add_argument("--rhs", required=True)
    p.add_argument("--mode", choices=("exact", "fast"), default="exact")
    p.add_argument("--out")
    p.add_argument("--tol", type=float, default=1e-12, help="inner solve tolerance in exact mode")
    p.add_argument("--rho", help="radius override: one value for every level or one per level")
    p.add_argument("--full-radius", action="store_true", help="disable localization")
    p.add_argument("--export", action="store_true", help="also write the per-level hierarchy")
    _add_tree_flags(p)
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("diagnose", help="write a diagnostic report")
    p.add_argument("--matrix", required=True)
    p.add_argument("--rhs")
    p.add_argument("--checks", required=True, help="comma list of " + ",".join(CHECKS))
    p.add_argument("--out", help="report path (default <out dir>/report.json)")
    _add_tree_flags(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("calibrate", help="doubling search for the localization constant")
    p.add_argument("--q", type=int, default=4)
    p.add_argument("--epsilon", default="0.01,0.001")
    p.add_argument("--H", type=float, default=0.5)
    p.add_argument("--start", type=float, default=2.0**-6)
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("bench", help="time the fast solve over several grid sizes")
    p.add_argument("--q-list", default="5,6,7")
    p.add_argument("--out")
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (GambletError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
