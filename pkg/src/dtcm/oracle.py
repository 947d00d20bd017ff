"""Reference solutions: closed-form kernels and Crank-Nicolson finite differences."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DomainError, ModelError, NumericalError
from .grid import GridFn
from .models import CoefficientModel, ConstantModel, OUModel, TimeRampModel, builtin, points

EXACT_MODELS = ("const", "drift", "ou", "bs_log", "time_ramp")


def _gauss_1d(d, var):
    return np.exp(-d * d / (2.0 * var)) / np.sqrt(2.0 * math.pi * var)


@dataclass(frozen=True)
class ExactKernel:
    """Closed-form Green function; callable as ``K(t0, t, x, y)`` like the approximate kernels."""

    model: CoefficientModel

    def __post_init__(self):
        if not isinstance(self.model, (ConstantModel, OUModel, TimeRampModel)):
            raise ModelError(
                f"no closed-form kernel for model {self.model.name!r}; "
                f"exact kernels exist for {', '.join(EXACT_MODELS)}"
            )

    def lambda_max(self, t0: float, pts) -> float:
        pts = points(pts, self.model.N).reshape(-1, self.model.N)[:1]
        return float(np.linalg.eigvalsh(self.model.diffusion_matrix(t0, pts))[..., -1].max())

    def mean_var(self, t0: float, t: float, x: np.ndarray):
        """Mean (shape of ``x``) and covariance (N x N) of the transition law in ``y``."""
        tau = t - t0
        mdl = self.model
        if isinstance(mdl, OUModel):
            k, D = mdl.kappa, mdl.D
            if k == 0:
                return x, np.array([[2.0 * D * tau]])
            return x * math.exp(-k * tau), np.array([[D / k * -math.expm1(-2.0 * k * tau)]])
        if isinstance(mdl, TimeRampModel):
            var = 2.0 * mdl.a0 * (tau + mdl.delta * (t * t - t0 * t0) / 2.0)
            return x, np.array([[var]])
        return x + mdl.b * tau, 2.0 * mdl.a * tau

    def growth(self, t0: float, t: float) -> float:
        return math.exp(self.model.c * (t - t0)) if isinstance(self.model, ConstantModel) else 1.0

    def __call__(self, t0: float, t: float, x, y) -> np.ndarray:
        tau = float(t) - float(t0)
        if not tau > 0:
            raise DomainError("t must exceed t0")
        N = self.model.N
        x, y = np.broadcast_arrays(points(x, N), points(y, N))
        mean, cov = self.mean_var(float(t0), float(t), x)
        d = y - mean
        inv = np.linalg.inv(cov)
        quad = np.einsum("...i,ij,...j->...", d, inv, d)
        norm = (2.0 * math.pi) ** (-N / 2) / math.sqrt(np.linalg.det(cov))
        return self.growth(float(t0), float(t)) * norm * np.exp(-0.5 * quad)


def exact_kernel(model_id: str, params: Mapping | None, t0: float, t: float, x, y):
    """Closed-form Green function of a builtin model with an exact solution."""
    if model_id not in EXACT_MODELS:
        raise ModelError(f"no closed-form kernel for {model_id!r}; choose from {', '.join(EXACT_MODELS)}")
    out = ExactKernel(builtin(model_id, params))(t0, t, x, y)
    return float(out) if np.ndim(out) == 0 else out


def has_exact_kernel(model: CoefficientModel) -> bool:
    return isinstance(model, (ConstantModel, OUModel, TimeRampModel))


def propagate_gaussian(model: CoefficientModel, mass: float, mean, var, t0: float, t: float, x):
    """Exact solution at ``t`` for data ``mass * N(mean, var)`` at ``t0`` (isotropic ``var``)."""
    K = ExactKernel(model)
    N = model.N
    x = points(x, N)
    if t == t0:
        d = x - np.asarray(mean, dtype=float)
        return mass * np.exp(-0.5 * np.sum(d * d, axis=-1) / var) / (2 * math.pi * var) ** (N / 2)
    m, cov = K.mean_var(t0, t, x)
    cov = np.atleast_2d(cov) + var * np.eye(N)
    d = m - np.asarray(mean, dtype=float)
    inv = np.linalg.inv(cov)
    quad = np.einsum("...i,ij,...j->...", d, inv, d)
    norm = (2 * math.pi) ** (-N / 2) / math.sqrt(np.linalg.det(cov))
    return K.growth(t0, t) * mass * norm * np.exp(-0.5 * quad)


# --------------------------------------------------------------------------- Crank-Nicolson


def _require_1d(model: CoefficientModel) -> None:
    if model.N != 1:
        raise ModelError("the finite-difference reference solver is one-dimensional")


def _coeffs(model: CoefficientModel, t: float, x: np.ndarray):
    return model.value("a", t, x), model.value("b", t, x), model.value("c", t, x)


def _dirichlet_bands(model: CoefficientModel, t: float, x: np.ndarray, h: float):
    """Sub/main/super diagonals of the central-difference operator on interior nodes."""
    a, b, c = _coeffs(model, t, x)
    lo = a / h**2 - b / (2 * h)
    mid = -2 * a / h**2 + c
    up = a / h**2 + b / (2 * h)
    return lo, mid, up


def cn_solve(model: CoefficientModel, u0: GridFn, t0: float, T: float, steps: int) -> GridFn:
    """Crank-Nicolson (theta = 1/2) with homogeneous Dirichlet ends; returns the solution at ``t0 + T``."""
    _require_1d(model)
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if not T > 0:
        raise DomainError("horizon must be positive")
    x = u0.axes()[0]
    h = u0.h[0]
    n = len(x)
    if n < 3:
        raise DomainError("need at least three grid nodes")
    xi = x[1:-1]
    u = np.asarray(u0.values, dtype=float).copy()
    u[0] = u[-1] = 0.0
    dt = T / steps
    bands_now = _dirichlet_bands(model, t0, xi, h)
    ab = np.empty((3, n - 2))
    for k in range(steps):
        t_next = t0 + (k + 1) * dt
        bands_next = bands_now if not model.time_dependent else _dirichlet_bands(model, t_next, xi, h)
        lo, mid, up = bands_now
        ui = u[1:-1]
        rhs = ui + 0.5 * dt * (mid * ui)
        rhs[1:] += 0.5 * dt * lo[1:] * ui[:-1]
        rhs[:-1] += 0.5 * dt * up[:-1] * ui[1:]
        lo, mid, up = bands_next
        ab[0, 1:] = -0.5 * dt * up[:-1]
        ab[0, 0] = 0.0
        ab[1] = 1.0 - 0.5 * dt * mid
        ab[2, :-1] = -0.5 * dt * lo[1:]
        ab[2, -1] = 0.0
        try:
            new = sla.solve_banded((1, 1), ab, rhs, check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericalError(f"tridiagonal solve failed at step {k + 1}/{steps}, t={t_next:.6g}: {exc}") from None
        if not np.all(np.isfinite(new)):
            raise NumericalError(f"non-finite Crank-Nicolson solution at step {k + 1}/{steps}, t={t_next:.6g}")
        u[1:-1] = new
        bands_now = bands_next
    return u0.with_values(u)


def periodic_operator(model: CoefficientModel, t: float, x: np.ndarray, h: float) -> sp.csr_matrix:
    """Central-difference ``a u'' + b u' + c u`` on a periodic grid (sparse, cyclic)."""
    a, b, c = _coeffs(model, t, x)
    a, b, c = (np.broadcast_to(v, x.shape) for v in (a, b, c))
    n = len(x)
    i = np.arange(n)
    lo = a / h**2 - b / (2 * h)
    up = a / h**2 + b / (2 * h)
    mid = -2 * a / h**2 + c
    rows = np.concatenate([i, i, i])
    cols = np.concatenate([(i - 1) % n, i, (i + 1) % n])
    return sp.csr_matrix((np.concatenate([lo, mid, up]), (rows, cols)), shape=(n, n))


class PeriodicCN:
    """Crank-Nicolson propagator on a periodic 1D grid with a fixed time step."""

    def __init__(self, model: CoefficientModel, x: np.ndarray, dt: float):
        _require_1d(model)
        self.model, self.x, self.dt = model, np.asarray(x, dtype=float), float(dt)
        self.h = float(self.x[1] - self.x[0])
        self._fixed = None if model.time_dependent else self._factor(0.0, self.dt)

    def _factor(self, t: float, t_next: float):
        I = sp.identity(len(self.x), format="csc")
        Ln = periodic_operator(self.model, t, self.x, self.h)
        Lp = Ln if not self.model.time_dependent else periodic_operator(self.model, t_next, self.x, self.h)
        explicit = (I + 0.5 * self.dt * Ln).tocsr()
        lu = spla.splu((I - 0.5 * self.dt * Lp).tocsc())
        return explicit, lu

    def step(self, u: np.ndarray, t: float = 0.0) -> np.ndarray:
        explicit, lu = self._fixed or self._factor(t, t + self.dt)
        out = lu.solve(explicit @ u)
        if not np.all(np.isfinite(out)):
            raise NumericalError(f"non-finite periodic Crank-Nicolson solution at t={t:.6g}")
        return out

    def run(self, u: np.ndarray, steps: int, t: float = 0.0) -> np.ndarray:
        for k in range(steps):
            u = self.step(u, t + k * self.dt)
        return u
