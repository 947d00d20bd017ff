"""Kernel quadrature on grids, the bootstrap product of short-time kernels, and grid norms."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import DomainError, ModelError, NumericalError
from .expansion import ExpansionCache, KernelEvaluator, ZPolicy
from .grid import GridFn, parse_grid  # noqa: F401  (re-exported)
from .models import CoefficientModel

DEFAULT_TRUNC_C = 8.0
ROW_CHUNK = 256


class Kernel(Protocol):
    def __call__(self, t0: float, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    def lambda_max(self, t0: float, pts: np.ndarray) -> float: ...


def resolve_threads(threads: int | None = None) -> int:
    """Explicit count, else ``DTCM_THREADS``, else the number of logical cores."""
    if threads is None:
        env = os.environ.get("DTCM_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    if threads < 1:
        raise ValueError("thread count must be at least 1")
    return int(threads)


def truncation_radius(lam_max: float, tau: float, trunc_c: float | None) -> float:
    """``trunc_c`` standard deviations of the widest frozen Gaussian, ``sqrt(2 lam_max tau)`` each."""
    if trunc_c is None or math.isinf(trunc_c):
        return math.inf
    if not trunc_c > 0:
        raise ValueError("truncation constant must be positive")
    return trunc_c * math.sqrt(2.0 * lam_max * tau)


@dataclass(frozen=True, eq=False)
class BandOperator:
    """Quadrature matrix stored by node offset: ``v[i] = sum_o W[i, o] u[i + o]``."""

    shape: tuple[int, ...]
    offsets: np.ndarray  # (n_offsets, N) integer
    weights: np.ndarray  # (n_nodes, n_offsets)

    def apply(self, values: np.ndarray) -> np.ndarray:
        vals = np.asarray(values, dtype=float).reshape(self.shape)
        pad = np.max(np.abs(self.offsets), axis=0) if len(self.offsets) else np.zeros(len(self.shape), int)
        padded = np.pad(vals, [(int(p), int(p)) for p in pad])
        out = np.zeros(vals.size)
        # fixed offset order keeps every row's summation order independent of threading
        for k, off in enumerate(self.offsets):
            sl = tuple(slice(int(p + o), int(p + o + n)) for p, o, n in zip(pad, off, self.shape))
            out += self.weights[:, k] * padded[sl].reshape(-1)
        return out.reshape(self.shape)


def _offsets(h: tuple[float, ...], shape: tuple[int, ...], radius: float) -> np.ndarray:
    reach = [n - 1 if math.isinf(radius) else min(n - 1, int(math.floor(radius / hh + 1e-9)))
             for hh, n in zip(h, shape)]
    grids = np.meshgrid(*[np.arange(-r, r + 1) for r in reach], indexing="ij")
    offs = np.stack([g.reshape(-1) for g in grids], axis=-1)
    if not math.isinf(radius):
        dist = np.sqrt(np.sum((offs * np.asarray(h)) ** 2, axis=-1))
        offs = offs[dist <= radius * (1 + 1e-12)]
    return offs.astype(int)


def kernel_band(K: Kernel, grid: GridFn, t0: float, t: float, trunc_c: float | None = DEFAULT_TRUNC_C,
                threads: int | None = None) -> BandOperator:
    """Trapezoid quadrature weights of ``K`` on ``grid``, truncated to a ball of Gaussian widths."""
    tau = float(t) - float(t0)
    if not tau > 0:
        raise DomainError("t must exceed t0")
    pts = grid.points()
    radius = truncation_radius(K.lambda_max(t0, pts), tau, trunc_c)
    offs = _offsets(grid.h, grid.shape, radius)
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in grid.shape], indexing="ij"), axis=-1).reshape(-1, grid.N)
    tw = grid.trapezoid_weights()
    h = np.asarray(grid.h)
    lim = np.asarray(grid.shape)
    W = np.zeros((grid.size, len(offs)))

    def fill(lo: int, hi: int) -> None:
        rows = idx[lo:hi]
        tgt = rows[:, None, :] + offs[None, :, :]
        inside = np.all((tgt >= 0) & (tgt < lim), axis=-1)
        r, o = np.nonzero(inside)
        if len(r) == 0:
            return
        x = pts[lo:hi][r]
        yi = tgt[r, o]
        y = np.asarray(grid.origin) + yi * h
        vals = np.asarray(K(t0, t, x, y), dtype=float) * tw[tuple(yi.T)]
        W[lo + r, o] = vals

    chunks = [(s, min(s + ROW_CHUNK, grid.size)) for s in range(0, grid.size, ROW_CHUNK)]
    nthreads = resolve_threads(threads)
    if nthreads == 1 or len(chunks) == 1:
        for lo, hi in chunks:
            fill(lo, hi)
    else:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            list(pool.map(lambda c: fill(*c), chunks))
    if not np.all(np.isfinite(W)):
        raise NumericalError("kernel produced non-finite quadrature weights")
    return BandOperator(grid.shape, offs, W)


def apply_kernel(K: Kernel, u: GridFn, t0: float, t: float, trunc_c: float | None = DEFAULT_TRUNC_C,
                 threads: int | None = None) -> GridFn:
    """``v(x_i) = sum_j K(t0, t, x_i, y_j) u(y_j) w_j`` with zero extension outside the grid."""
    return u.with_values(kernel_band(K, u, t0, t, trunc_c, threads).apply(u.values))


def propagate(K: Kernel, u0: GridFn, t0: float, T: float, n: int, *,
              trunc_c: float | None = DEFAULT_TRUNC_C, threads: int | None = None,
              homogeneous: bool = True) -> GridFn:
    """``n`` sequential kernel applications over ``[t0, t0 + T]``; reuses the band when homogeneous."""
    if n < 1:
        raise ValueError("number of steps must be at least 1")
    if not T > 0:
        raise DomainError("horizon must be positive")
    dt = T / n
    band = None
    u = np.asarray(u0.values, dtype=float)
    for k in range(n):
        a, b = t0 + k * dt, t0 + (k + 1) * dt
        if band is None or not homogeneous:
            band = kernel_band(K, u0, a, b, trunc_c, threads)
        u = band.apply(u)
        if not np.all(np.isfinite(u)):
            raise NumericalError(f"non-finite values after bootstrap step {k + 1} of {n}")
    return u0.with_values(u)


def bootstrap(model: CoefficientModel, m: int, zp: ZPolicy | None, u0: GridFn, T: float, n: int,
              trunc_c: float | None = DEFAULT_TRUNC_C, *, t0: float = 0.0, threads: int | None = None,
              cache: ExpansionCache | None = None) -> GridFn:
    """Product of ``n`` order-m kernels ``G^[m]_{(k+1)d, kd}`` applied to ``u0`` (``d = T / n``).

    The default z-policy here is ``left``: the freeze point is the target node.
    """
    if model.N != u0.N:
        raise ModelError(f"model dimension {model.N} != grid dimension {u0.N}")
    K = KernelEvaluator(model, m, zp if zp is not None else ZPolicy.left(), cache)
    return propagate(K, u0, t0, T, n, trunc_c=trunc_c, threads=threads, homogeneous=K.time_homogeneous)


# --------------------------------------------------------------------------- norms


@dataclass(frozen=True)
class NormSpec:
    """Discrete ``W^{r,p}_a`` norm with weight ``exp(a <x - w>)``, ``<x> = sqrt(1 + |x|^2)``."""

    p: float = 2
    a: float = 0.0
    w: tuple[float, ...] | None = None
    r: int = 0

    def __post_init__(self):
        if self.p not in (2, math.inf):
            raise ValueError("norm exponent p must be 2 or inf")
        if self.r not in (0, 1):
            raise ValueError("Sobolev order r must be 0 or 1")

    @classmethod
    def parse(cls, text: str) -> "NormSpec":
        """``p=2,a=0.5,r=0[,w=0;1]``; ``p=inf`` selects the sup norm."""
        kw: dict = {}
        for part in filter(None, (s.strip() for s in text.split(","))):
            k, _, v = part.partition("=")
            k = k.strip()
            if k == "p":
                kw["p"] = math.inf if v.strip().lower() in ("inf", "infinity") else float(v)
            elif k == "a":
                kw["a"] = float(v)
            elif k == "r":
                kw["r"] = int(v)
            elif k == "w":
                kw["w"] = tuple(float(c) for c in v.split(";"))
            else:
                raise ValueError(f"unknown norm field {k!r}")
        return cls(**kw)

    def __str__(self) -> str:
        p = "inf" if math.isinf(self.p) else f"{self.p:g}"
        w = "" if self.w is None else ",w=" + ";".join(f"{c:g}" for c in self.w)
        return f"p={p},a={self.a:g},r={self.r}{w}"


def weight(pts: np.ndarray, a: float, w=None) -> np.ndarray:
    w = np.zeros(pts.shape[-1]) if w is None else np.asarray(w, dtype=float)
    d = pts - w
    return np.exp(a * np.sqrt(1.0 + np.sum(d * d, axis=-1)))


def grid_norm(u: GridFn, spec: NormSpec = NormSpec()) -> float:
    """Weighted discrete norm (trapezoid rule for finite ``p``); ``r = 1`` adds central-difference gradients of ``rho_a u``."""
    if spec.r == 1 and min(u.shape) < 3:
        raise DomainError("first-order norms need at least three nodes per axis")
    f = weight(u.points(), spec.a, spec.w).reshape(u.shape) * u.values
    parts = [f]
    if spec.r == 1:
        grads = np.gradient(f, *u.h) if u.N > 1 else [np.gradient(f, u.h[0])]
        parts += list(grads)
    if math.isinf(spec.p):
        return float(max(np.max(np.abs(g)) for g in parts))
    w = u.trapezoid_weights()
    return float(math.sqrt(sum(float(np.sum(w * g * g)) for g in parts)))


# --------------------------------------------------------------------------- projection experiment


def lowpass(values: np.ndarray, cutoff: int) -> np.ndarray:
    """Keep Fourier modes with ``|k| <= cutoff`` on a periodic grid; identity at full spectrum."""
    n = values.shape[-1]
    if cutoff >= n // 2:
        return np.array(values, dtype=float, copy=True)
    spec = np.fft.rfft(values)
    spec[cutoff + 1:] = 0.0
    return np.fft.irfft(spec, n)


def narrow_bump(x: np.ndarray, centre: float = math.pi, sharpness: float = 200.0) -> np.ndarray:
    """Smooth periodic bump ``exp(s (cos(x - c) - 1))`` with a broad spectrum."""
    return np.exp(sharpness * (np.cos(x - centre) - 1.0))


def projection_experiment(model: CoefficientModel, cutoff: int, T0: float, n: int, *,
                          points: int = 256, fine_steps: int = 1024, x0: np.ndarray | None = None) -> dict:
    """Compare the reference evolution with the projected one on ``[0, 2 pi)``.

    ``x_n`` is ``fine_steps`` Crank-Nicolson steps over ``T0``. ``y_{k+1} = P U_d y_k`` uses the
    same fine propagator for ``U_d`` (``fine_steps / n`` substeps) and the low-pass ``P``.
    """
    from .oracle import PeriodicCN

    L = 2 * math.pi
    if model.N != 1 or not model.is_periodic(L):
        raise ModelError(f"projection experiment needs 1D coefficients periodic on [0, 2 pi); "
                         f"model {model.name!r} is not")
    if n < 1 or fine_steps % n:
        raise ValueError(f"fine_steps={fine_steps} must be a positive multiple of n={n}")
    x = np.arange(points) * (L / points)
    x0 = narrow_bump(x) if x0 is None else np.asarray(x0, dtype=float)
    prop = PeriodicCN(model, x, T0 / fine_steps)
    sub = fine_steps // n
    xn = prop.run(x0, fine_steps)
    y0 = lowpass(x0, cutoff)
    y = y0
    for k in range(n):
        y = lowpass(prop.run(y, sub, k * sub * prop.dt), cutoff)
    h = L / points

    def norm(v):
        return float(math.sqrt(np.sum(v * v) * h))

    err = norm(xn - y)
    denom = norm(x0 - y0) + T0 * norm(y0)
    return {
        "n": n,
        "cutoff": cutoff,
        "T0": T0,
        "error": err,
        "norm_x0": norm(x0),
        "norm_x0_minus_y0": norm(x0 - y0),
        "norm_y0": norm(y0),
        "C": err / denom if denom > 0 else 0.0,
    }
