"""Convergence studies behind the ``study`` subcommand: sweeps, oracle errors and log-log fits."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from . import __version__
from .errors import ModelError
from .expansion import ExpansionCache, KernelEvaluator, ZPolicy
from .grid import GridFn
from .models import CoefficientModel
from .oracle import EXACT_MODELS, ExactKernel, cn_solve, has_exact_kernel, propagate_gaussian
from .stepper import DEFAULT_TRUNC_C, bootstrap, projection_experiment, propagate, resolve_threads

FLOOR_FACTOR = 10.0


def fit_slope(xs: Sequence[float], errs: Sequence[float]) -> tuple[float, float]:
    """Ordinary least squares of ``log err`` on ``log x``: ``(slope, intercept)``."""
    lx = np.log(np.asarray(xs, dtype=float))
    ly = np.log(np.asarray(errs, dtype=float))
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, ly, rcond=None)
    return float(slope), float(intercept)


def fit_with_floor(xs, errs, floors=None, factor: float = FLOOR_FACTOR) -> dict:
    """OLS over every sweep point, plus a refit without points within ``factor`` of their floor.

    ``floor_limited`` is set when fewer than two points clear the floor; the slope over all
    points is still reported (it is ``None`` only if some error is zero or non-finite).
    """
    xs = [float(v) for v in xs]
    errs = [float(v) for v in errs]
    valid = [e > 0 and math.isfinite(e) for e in errs]
    used = list(valid)
    if floors is not None:
        used = [u and e > factor * f for u, e, f in zip(used, errs, floors)]
    keep = [i for i, u in enumerate(used) if u]
    out = {"used": used, "n_points": len(xs), "n_above_floor": len(keep), "floor_limited": len(keep) < 2,
           "slope": None, "intercept": None, "slope_above_floor": None, "intercept_above_floor": None}
    if all(valid) and len(xs) >= 2:
        out["slope"], out["intercept"] = fit_slope(xs, errs)
    if len(keep) >= 2:
        out["slope_above_floor"], out["intercept_above_floor"] = fit_slope([xs[i] for i in keep],
                                                                           [errs[i] for i in keep])
    return out


def _fit_fields(fit: dict) -> dict:
    return {k: v for k, v in fit.items() if k != "used"}


def _require_exact(model: CoefficientModel, study: str) -> ExactKernel:
    if not has_exact_kernel(model):
        raise ModelError(
            f"study {study!r} has no oracle for model {model.name!r}; "
            f"valid model/oracle pairs: {', '.join(m + '/closed-form' for m in EXACT_MODELS)}"
        )
    return ExactKernel(model)


def _pmap(fn, items, threads):
    items = list(items)
    if threads == 1 or len(items) < 2:
        return [fn(v) for v in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _model_info(model: CoefficientModel) -> dict:
    return {"id": model.id, "name": model.name, "params": model.params, "N": model.N}


def _runtime(threads: int) -> dict:
    return {"threads": threads, "version": __version__}


# --------------------------------------------------------------------------- kernel order


def operator_errors(ev: KernelEvaluator, K: ExactKernel, t: float, window: np.ndarray,
                    u_max: float = 12.0, du: float = 0.01, bump_width: float = 1.0) -> tuple[float, float]:
    """Two error measures of ``G^[m]_t - G_t`` (1D) at time ``t`` over target points ``window``.

    Operator norm on bounded functions: ``sup_x int |dG(x, y)| dy``, integrated in the
    rescaled variable ``u = (x - y)/sqrt(t)`` over ``|u| <= u_max``. Fixed bump:
    ``sup_x |int dG(x, y) phi(y) dy|`` for the unit-L2 Gaussian ``phi`` of width ``bump_width``.
    """
    s = math.sqrt(t)
    lam = K.lambda_max(0.0, window[:1])
    ug = np.arange(-u_max, u_max + du / 2, du) * math.sqrt(lam)
    w = np.full(ug.shape, du * math.sqrt(lam))
    w[0] = w[-1] = w[0] / 2
    X = window[:, None]
    Y = X - s * ug[None, :]
    d = ev(0.0, t, X[..., None], Y[..., None]) - K(0.0, t, X[..., None], Y[..., None])
    op = float(np.max(np.sum(np.abs(d) * w, axis=1)) * s)
    phi = np.exp(-Y**2 / (2 * bump_width**2)) / (math.pi * bump_width**2) ** 0.25
    bump = float(np.max(np.abs(np.sum(d * phi * w, axis=1))) * s)
    return op, bump


def kernel_order_study(model: CoefficientModel, m: int, exponents: Sequence[int] = range(4, 11), *,
                       zp: ZPolicy | None = None, window: Sequence[float] = (-1.0, 1.0), n_window: int = 21,
                       threads: int | None = None, cache: ExpansionCache | None = None) -> dict:
    """Short-time kernel error over ``t = 2^-k``; the fitted slope targets ``(m + 1)/2``."""
    if model.N != 1:
        raise ModelError("the kernel-order study is implemented for one-dimensional models")
    K = _require_exact(model, "kernel-order")
    zp = zp if zp is not None else ZPolicy.midpoint()
    ev = KernelEvaluator(model, m, zp, cache)
    xs = np.linspace(window[0], window[1], n_window)
    ts = [2.0 ** -int(k) for k in exponents]
    nthreads = resolve_threads(threads)
    res = _pmap(lambda t: operator_errors(ev, K, t, xs), ts, nthreads)
    op = [r[0] for r in res]
    bump = [r[1] for r in res]
    floors = [1e-15 * max(1.0, t ** -0.5) for t in ts]  # rounding of O(1/sqrt t) kernel values
    fit = fit_with_floor(ts, op, floors)
    bump_fit = fit_with_floor(ts, bump, floors)
    return {
        "study": "kernel-order",
        "model": _model_info(model),
        "m": m,
        "z_policy": str(zp),
        "sweep": {"name": "t", "values": ts},
        "points": [{"t": t, "error": e, "error_fixed_bump": b, "floor": f, "used": u}
                   for t, e, b, f, u in zip(ts, op, bump, floors, fit["used"])],
        "fit": _fit_fields(fit),
        "fit_fixed_bump": _fit_fields(bump_fit),
        "expected_slope": (m + 1) / 2,
        "config": {"window": list(window), "n_window": n_window, "error": "sup_x int |dG| dy"},
        "runtime": _runtime(nthreads),
    }


# --------------------------------------------------------------------------- bootstrap order


def gaussian_data(model: CoefficientModel, grid: GridFn, mean: float, var: float) -> GridFn:
    pts = grid.points()
    vals = np.exp(-0.5 * np.sum((pts - mean) ** 2, axis=-1) / var) / (2 * math.pi * var) ** (model.N / 2)
    return grid.with_values(vals.reshape(grid.shape))


def bootstrap_order_study(model: CoefficientModel, m: int, ns: Sequence[int] = (8, 16, 32, 64, 128), *,
                          T: float = 1.0, zp: ZPolicy | None = None, half_width: float = 8.0,
                          h: float = 1 / 64, inset: float = 4.0, mean: float = 0.3, var: float = 0.5,
                          trunc_c: float = DEFAULT_TRUNC_C, cn_refine: int = 16, cn_steps: int = 2**12,
                          threads: int | None = None, cache: ExpansionCache | None = None) -> dict:
    """Bootstrap error at fixed ``T`` against the exact (or fine Crank-Nicolson) solution."""
    if model.N != 1:
        raise ModelError("the bootstrap-order study is implemented for one-dimensional models")
    zp = zp if zp is not None else ZPolicy.left()
    count = int(round(2 * half_width / h)) + 1
    grid = GridFn.uniform([-half_width], [half_width], [count])
    u0 = gaussian_data(model, grid, mean, var)
    win = grid.window(inset)
    nthreads = resolve_threads(threads)
    if has_exact_kernel(model):
        oracle = "closed-form"
        ref = propagate_gaussian(model, 1.0, [mean], var, 0.0, T, grid.points()).reshape(grid.shape)
        K = ExactKernel(model)
        floors = [float(np.max(np.abs(propagate(K, u0, 0.0, T, n, trunc_c=trunc_c, threads=nthreads).values
                                      - ref)[win])) for n in ns]
    else:
        oracle = "crank-nicolson"
        fine = GridFn.uniform([-half_width], [half_width], [(count - 1) * cn_refine + 1])
        fine = gaussian_data(model, fine, mean, var)
        ref = cn_solve(model, fine, 0.0, T, cn_steps).values[::cn_refine]
        floors = None
    errs = []
    for n in ns:
        un = bootstrap(model, m, zp, u0, T, n, trunc_c, threads=nthreads, cache=cache)
        errs.append(float(np.max(np.abs(un.values - ref)[win])))
    fit = fit_with_floor(ns, errs, floors)
    return {
        "study": "bootstrap-order",
        "model": _model_info(model),
        "m": m,
        "z_policy": str(zp),
        "sweep": {"name": "n", "values": [int(n) for n in ns]},
        "points": [{"n": int(n), "error": e, "floor": None if floors is None else floors[i], "used": fit["used"][i]}
                   for i, (n, e) in enumerate(zip(ns, errs))],
        "fit": _fit_fields(fit),
        "expected_slope": -(m - 1) / 2,
        "config": {"T": T, "grid": [-half_width, half_width, count], "inset": inset,
                   "initial": {"gaussian_mean": mean, "gaussian_var": var}, "trunc_c": trunc_c,
                   "oracle": oracle, "error": "max over interior window"},
        "runtime": _runtime(nthreads),
    }


# --------------------------------------------------------------------------- projection


def projection_study(model: CoefficientModel, ns: Sequence[int] = (8, 16, 32, 64), *, cutoff: int = 32,
                     T0: float = 0.25, points: int = 256, fine_steps: int = 1024,
                     threads: int | None = None) -> dict:
    """Constant ``C`` of the projection bound for each step count, plus its spread."""
    nthreads = resolve_threads(threads)
    reps = _pmap(lambda n: projection_experiment(model, cutoff, T0, n, points=points, fine_steps=fine_steps),
                 ns, nthreads)
    Cs = [r["C"] for r in reps]
    floor = 1e-13
    limited = all(r["error"] < floor * max(1.0, r["norm_x0"]) for r in reps)
    spread = max(Cs) / min(Cs) if min(Cs) > 0 else None
    return {
        "study": "projection",
        "model": _model_info(model),
        "m": None,
        "z_policy": None,
        "sweep": {"name": "n", "values": [int(n) for n in ns]},
        "points": [{"n": r["n"], "error": r["error"], "C": r["C"], "norm_x0": r["norm_x0"],
                    "norm_x0_minus_y0": r["norm_x0_minus_y0"], "norm_y0": r["norm_y0"]} for r in reps],
        "fit": {"C_min": min(Cs), "C_max": max(Cs), "C_spread": spread, "floor_limited": limited},
        "expected_slope": None,
        "config": {"cutoff": cutoff, "T0": T0, "points": points, "fine_steps": fine_steps},
        "runtime": _runtime(nthreads),
    }
