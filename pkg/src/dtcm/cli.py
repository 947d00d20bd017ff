"""``dtcm`` command line: kernel dumps, bootstrap solves and convergence studies.

Exit status is 0 on success, 1 on a mathematical or runtime failure (with a JSON error
object on stderr) and 2 on malformed flags.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources

import numpy as np

from . import __version__
from .errors import DTCMError
from .expansion import DEFAULT_CACHE, MAX_ORDER, ZPolicy, eval_kernel
from .grid import GridFn, parse_grid
from .models import CoefficientModel, builtin, from_spec
from .oracle import cn_solve, has_exact_kernel, propagate_gaussian
from .stepper import DEFAULT_TRUNC_C, NormSpec, bootstrap, grid_norm, resolve_threads
from .studies import bootstrap_order_study, kernel_order_study, projection_study

STUDIES = ("kernel-order", "bootstrap-order", "projection")
DEFAULT_SWEEPS = {"kernel-order": "4:10", "bootstrap-order": "8,16,32,64,128", "projection": "8,16,32,64"}


# --------------------------------------------------------------------------- flag parsing


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _order(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer order, got {text!r}") from None
    if not 0 <= v <= MAX_ORDER:
        raise argparse.ArgumentTypeError(f"order must lie in 0..{MAX_ORDER}")
    return v


def _finite(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a finite number, got {text!r}")
    return v


def _param_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        raise argparse.ArgumentTypeError(f"model parameter value {text!r} is not a number") from None


def _model_flag(text: str):
    """``id[:k=v,...]`` or a path to a JSON model file; the model is built after parsing."""
    if text.endswith(".json") or os.path.sep in text:
        return ("file", text)
    name, _, rest = text.partition(":")
    params = {}
    for part in filter(None, rest.split(",")):
        k, eq, v = part.partition("=")
        if not eq or not k.strip():
            raise argparse.ArgumentTypeError(f"model parameter {part!r} is not key=value")
        params[k.strip()] = _param_value(v.strip())
    if not name:
        raise argparse.ArgumentTypeError("empty model id")
    return ("builtin", name, params)


def _grid_flag(text: str):
    try:
        return parse_grid(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _zpolicy_flag(text: str) -> ZPolicy:
    try:
        return ZPolicy.parse(text)
    except (ValueError, DTCMError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _norm_flag(text: str) -> NormSpec:
    try:
        return NormSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _init_flag(text: str):
    kind, _, arg = text.partition(":")
    if kind == "gaussian" and arg:
        tau0 = _finite(arg)
        if not tau0 > 0:
            raise argparse.ArgumentTypeError("gaussian width must be positive")
        return ("gaussian", tau0)
    if text.endswith(".csv"):
        return ("csv", text)
    raise argparse.ArgumentTypeError(f"--init expects gaussian:<tau0> or a .csv file, got {text!r}")


def _reports_flag(text: str) -> tuple[str, ...]:
    items = tuple(filter(None, (s.strip() for s in text.split(","))))
    bad = [s for s in items if s not in ("norms", "error")]
    if bad or not items:
        raise argparse.ArgumentTypeError(f"--report takes norms and/or error, got {text!r}")
    return items


def parse_sweep(text: str) -> list[int]:
    """Comma list of integers; ``a:b`` expands to the inclusive range."""
    out: list[int] = []
    for part in filter(None, (s.strip() for s in text.split(","))):
        lo, colon, hi = part.partition(":")
        try:
            if colon:
                a, b = int(lo), int(hi)
                if b < a:
                    raise ValueError
                out.extend(range(a, b + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad sweep entry {part!r}") from None
    if not out or any(v < 1 for v in out):
        raise argparse.ArgumentTypeError("sweep needs positive integers")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtcm", description="Order-m parabolic Green-function approximations.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, need_m=True):
        sp.add_argument("--model", type=_model_flag, required=True,
                        help="builtin id with optional parameters (ou:kappa=2,D=0.5) or a JSON model file")
        sp.add_argument("--m", type=_order, required=need_m, default=None, help="expansion order")
        sp.add_argument("--threads", type=_positive_int, default=None,
                        help="worker threads (default: DTCM_THREADS, then the core count)")
        sp.add_argument("--seed", type=int, default=0, help="seed for randomized model checks")
        sp.add_argument("--out", default=None, help="output file (default: stdout)")

    k = sub.add_parser("kernel", help="dump G_m(t0, t, x, y) over a Cartesian grid of x and y")
    common(k)
    k.add_argument("--t", type=_finite, required=True)
    k.add_argument("--t0", type=_finite, default=0.0)
    k.add_argument("--grid", type=_grid_flag, required=True)
    k.add_argument("--z-policy", type=_zpolicy_flag, default=ZPolicy.midpoint())

    s = sub.add_parser("solve", help="bootstrap the initial-value problem and write u_n as CSV")
    common(s)
    s.add_argument("--T", type=_finite, required=True, help="horizon")
    s.add_argument("--steps", type=_positive_int, required=True)
    s.add_argument("--grid", type=_grid_flag, default=None)
    s.add_argument("--init", type=_init_flag, required=True, help="gaussian:<tau0> or a grid CSV file")
    s.add_argument("--t0", type=_finite, default=0.0)
    s.add_argument("--trunc-c", type=_finite, default=DEFAULT_TRUNC_C)
    s.add_argument("--z-policy", type=_zpolicy_flag, default=ZPolicy.left())
    s.add_argument("--report", type=_reports_flag, default=())
    s.add_argument("--norm", type=_norm_flag, default=NormSpec())
    s.add_argument("--inset", type=_finite, default=None,
                   help="interior window inset for --report error (default: a quarter of the shortest axis)")

    st = sub.add_parser("study", help="convergence study with a log-log slope fit")
    st.add_argument("study", choices=STUDIES)
    common(st, need_m=False)
    st.add_argument("--sweep", type=parse_sweep, default=None,
                    help="kernel-order: exponents k with t = 2^-k; otherwise step counts n (a:b is a range)")
    st.add_argument("--z-policy", type=_zpolicy_flag, default=None)
    st.add_argument("--T", type=_finite, default=1.0, help="bootstrap-order horizon")
    st.add_argument("--cutoff", type=_positive_int, default=32, help="projection: largest kept wavenumber")
    st.add_argument("--T0", type=_finite, default=0.25, help="projection horizon")
    st.add_argument("--csv", default=None, help="table destination (default: stdout)")
    return p


# --------------------------------------------------------------------------- helpers


def load_model(flag, seed: int = 0) -> CoefficientModel:
    if flag[0] == "file":
        with open(flag[1]) as fh:
            return from_spec(fh.read(), seed=seed)
    return builtin(flag[1], flag[2])


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def _write(text: str, dest: str | None) -> None:
    if dest is None:
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        with open(dest, "w", newline="") as fh:
            fh.write(text)


def _grid_for(model: CoefficientModel, spec) -> GridFn:
    lo, hi, count = spec
    if len(lo) != model.N:
        raise DTCMError(f"grid has {len(lo)} axes but the model has dimension {model.N}")
    return GridFn.uniform(lo, hi, count)


# --------------------------------------------------------------------------- commands


def cmd_kernel(args) -> int:
    model = load_model(args.model, args.seed)
    grid = _grid_for(model, args.grid)
    pts = grid.points()
    N = model.N
    threads = resolve_threads(args.threads)
    chunks = [pts[i:i + 64] for i in range(0, len(pts), 64)]

    def rows(xs):
        return eval_kernel(model, args.m, args.z_policy, args.t0, args.t, xs[:, None, :], pts[None, :, :],
                           cache=DEFAULT_CACHE)

    if threads == 1 or len(chunks) < 2:
        blocks = [rows(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(rows, chunks))
    G = np.concatenate([np.reshape(b, (-1, len(pts))) for b in blocks], axis=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["t"] + [f"x{i + 1}" for i in range(N)] + [f"y{i + 1}" for i in range(N)] + ["G_m"])
    tt = _fmt(args.t)
    for i, x in enumerate(pts):
        xs = [_fmt(c) for c in x]
        for j, y in enumerate(pts):
            w.writerow([tt] + xs + [_fmt(c) for c in y] + [_fmt(G[i, j])])
    _write(buf.getvalue(), args.out)
    return 0


def initial_data(model: CoefficientModel, args) -> GridFn:
    kind, arg = args.init
    if kind == "csv":
        u0 = GridFn.from_csv(arg)
        if args.grid is not None and _grid_for(model, args.grid).shape != u0.shape:
            raise DTCMError("--grid disagrees with the shape of the --init CSV")
        if u0.N != model.N:
            raise DTCMError(f"initial data has dimension {u0.N} but the model has {model.N}")
        return u0
    if args.grid is None:
        raise DTCMError("--grid is required with gaussian initial data")
    grid = _grid_for(model, args.grid)
    vals = propagate_gaussian(builtin("const", {"N": model.N}), 1.0, [0.0] * model.N, 2.0 * arg,
                              0.0, 0.0, grid.points())
    return grid.with_values(np.reshape(vals, grid.shape))


def reference_solution(model: CoefficientModel, u0: GridFn, args) -> tuple[np.ndarray, str]:
    """Oracle for ``--report error``: closed form for Gaussian data, else fine Crank-Nicolson."""
    if args.init[0] == "gaussian" and has_exact_kernel(model):
        ref = propagate_gaussian(model, 1.0, [0.0] * model.N, 2.0 * args.init[1], args.t0, args.t0 + args.T,
                                 u0.points())
        return np.reshape(ref, u0.shape), "closed-form"
    if model.N != 1:
        raise DTCMError("no reference solution for this model and initial data")
    refine = 8
    fine_x = np.linspace(u0.origin[0], u0.upper[0], (u0.shape[0] - 1) * refine + 1)
    fine = GridFn((u0.origin[0],), (u0.h[0] / refine,), np.interp(fine_x, u0.axes()[0], u0.values))
    steps = max(256, 16 * args.steps)
    return cn_solve(model, fine, args.t0, args.T, steps).values[::refine], "crank-nicolson"


def cmd_solve(args) -> int:
    model = load_model(args.model, args.seed)
    u0 = initial_data(model, args)
    un = bootstrap(model, args.m, args.z_policy, u0, args.T, args.steps, args.trunc_c, t0=args.t0,
                   threads=args.threads, cache=DEFAULT_CACHE)
    _write(un.to_csv(), args.out)
    if args.report:
        summary: dict = {"steps": args.steps, "T": args.T, "m": args.m}
        if "norms" in args.report:
            summary["norm"] = str(args.norm)
            summary["norm_u0"] = grid_norm(u0, args.norm)
            summary["norm_un"] = grid_norm(un, args.norm)
        if "error" in args.report:
            inset = args.inset if args.inset is not None else min(
                (hh * (n - 1)) for hh, n in zip(un.h, un.shape)) / 4
            ref, oracle = reference_solution(model, u0, args)
            win = un.window(inset)
            summary["oracle"] = oracle
            summary["inset"] = inset
            summary["error_sup_interior"] = float(np.max(np.abs(un.values - ref)[win]))
        stream = sys.stdout if args.out is not None else sys.stderr
        stream.write(json.dumps(summary, sort_keys=True, allow_nan=False) + "\n")
    return 0


def study_table(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    cols = [k for k in report["points"][0] if k != "used"]
    w.writerow(cols + (["used"] if "used" in report["points"][0] else []))
    for pt in report["points"]:
        row = ["" if pt[c] is None else (_fmt(pt[c]) if isinstance(pt[c], float) else str(pt[c])) for c in cols]
        if "used" in pt:
            row.append("1" if pt["used"] else "0")
        w.writerow(row)
    return buf.getvalue()


def run_study(args) -> dict:
    model = load_model(args.model, args.seed)
    sweep = args.sweep or parse_sweep(DEFAULT_SWEEPS[args.study])
    if args.study == "kernel-order":
        if args.m is None:
            raise DTCMError("kernel-order needs --m")
        rep = kernel_order_study(model, args.m, sweep, zp=args.z_policy, threads=args.threads, cache=DEFAULT_CACHE)
    elif args.study == "bootstrap-order":
        if args.m is None:
            raise DTCMError("bootstrap-order needs --m")
        rep = bootstrap_order_study(model, args.m, sweep, T=args.T, zp=args.z_policy, threads=args.threads,
                                    cache=DEFAULT_CACHE)
    else:
        rep = projection_study(model, sweep, cutoff=args.cutoff, T0=args.T0, threads=args.threads)
    rep["runtime"]["seed"] = args.seed
    return rep


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


def load_schema() -> dict:
    return json.loads(resources.files("dtcm").joinpath("schemas/study_report.json").read_text())


def cmd_study(args) -> int:
    """JSON report to ``--out`` (or stdout); the CSV table to ``--csv``, or stdout when the JSON went to a file."""
    rep = run_study(args)
    _write(report_json(rep), args.out)
    if args.csv is not None or args.out is not None:
        _write(study_table(rep), args.csv)
    return 0


COMMANDS = {"kernel": cmd_kernel, "solve": cmd_solve, "study": cmd_study}


def _fail(exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
    return 1


def _attach_negative_values(argv: list[str]) -> list[str]:
    """Rewrite ``--flag -8:8:65`` as ``--flag=-8:8:65`` so argparse does not read the value as a flag."""
    out: list[str] = []
    for tok in argv:
        if (out and out[-1].startswith("--") and "=" not in out[-1] and len(tok) > 1 and tok[0] == "-"
                and (tok[1].isdigit() or tok[1] == ".")):
            out[-1] = f"{out[-1]}={tok}"
        else:
            out.append(tok)
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(_attach_negative_values(argv))
    try:
        return COMMANDS[args.command](args)
    except (DTCMError, ValueError, ArithmeticError, MemoryError, OSError) as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
