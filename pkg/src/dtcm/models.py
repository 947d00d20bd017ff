"""Coefficient providers for ``L = sum a_ij d_i d_j + sum b_i d_i + c``.

A model answers ``deriv(key, k, beta, t, x)``: the ``k``-th time derivative and
spatial multi-index ``beta`` derivative of one coefficient at points ``x``
(shape ``(..., N)``). Keys are ``("a", i, j)`` with ``i <= j``, ``("b", i)`` and
``("c",)``, zero-based; strings such as ``"a12"``, ``"b1"`` or ``"c"`` are accepted.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
from fractions import Fraction
from functools import lru_cache
from itertools import product
from typing import Callable, Mapping

import numpy as np

from .errors import EllipticityError, ModelError, NumericalError

Key = tuple


def coefficient_keys(N: int) -> list[Key]:
    keys: list[Key] = [("a", i, j) for i in range(N) for j in range(i, N)]
    keys += [("b", i) for i in range(N)]
    keys.append(("c",))
    return keys


_KEY_RE = re.compile(r"^\s*([abc])_?(\d*)\s*$")


def parse_key(which, N: int) -> Key:
    """Normalise a coefficient key; ``a`` entries are stored once with ``i <= j``."""
    if isinstance(which, str):
        m = _KEY_RE.match(which)
        if not m:
            raise ModelError(f"unknown coefficient {which!r}")
        name, digits = m.groups()
        idx = [int(d) - 1 for d in digits]
        if not idx and N == 1 and name != "c":
            idx = [0, 0] if name == "a" else [0]
        which = (name, *idx)
    which = tuple(which)
    name = which[0]
    if name == "a" and len(which) == 3:
        i, j = sorted(int(v) for v in which[1:])
        key: Key = ("a", i, j)
    elif name == "b" and len(which) == 2:
        key = ("b", int(which[1]))
    elif name == "c" and len(which) == 1:
        key = ("c",)
    else:
        raise ModelError(f"malformed coefficient key {which!r}")
    if any(not 0 <= v < N for v in key[1:]):
        raise ModelError(f"coefficient index out of range in {which!r} for N={N}")
    return key


def points(x, N: int) -> np.ndarray:
    """View ``x`` as an array of points with a trailing axis of length ``N``."""
    x = np.asarray(x, dtype=float)
    if N == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if x.shape[-1] != N:
        raise ModelError(f"points must have trailing dimension {N}, got shape {x.shape}")
    return x


def _stable_id(name: str, params: Mapping) -> str:
    blob = json.dumps({"model": name, "params": params}, sort_keys=True, default=str)
    return f"{name}-{hashlib.sha256(blob.encode()).hexdigest()[:12]}"


class CoefficientModel:
    """Base class. Subclasses implement :meth:`_deriv` and :meth:`_support`."""

    def __init__(self, N: int, name: str, params: Mapping, gamma: float, *,
                 time_dependent: bool = False, period: float | None = None,
                 translation_invariant: bool = False, box: Mapping | None = None):
        if N < 1:
            raise ModelError("dimension must be at least 1")
        if not gamma > 0:
            raise EllipticityError(f"ellipticity constant must be positive, got {gamma}")
        self.N = N
        self.name = name
        self.params = dict(params)
        self.gamma = float(gamma)
        self.time_dependent = time_dependent
        self.period = period
        self.translation_invariant = translation_invariant
        self.box = dict(box) if box else {"t": [0.0, 1.0], "x": [[-5.0, 5.0]] * N}
        self.id = _stable_id(name, self.params)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r}, {self.params})"

    # public API ---------------------------------------------------------------
    def deriv(self, which, k: int, beta, t: float, x) -> np.ndarray | float:
        key = parse_key(which, self.N)
        beta = self._beta(beta)
        if k < 0:
            raise ModelError("time derivative order must be nonnegative")
        pts = points(x, self.N)
        if not self.support(key, k, beta):
            out = np.zeros(pts.shape[:-1])
        else:
            out = np.broadcast_to(np.asarray(self._deriv(key, k, beta, float(t), pts), dtype=float),
                                  pts.shape[:-1]).copy()
        if not np.all(np.isfinite(out)):
            raise NumericalError(f"coefficient {key} derivative (k={k}, beta={beta}) is not finite")
        return float(out) if out.ndim == 0 else out

    def value(self, which, t: float, x):
        return self.deriv(which, 0, (0,) * self.N, t, x)

    def support(self, key: Key, k: int, beta: tuple[int, ...]) -> bool:
        """False only when the derivative is known to vanish identically."""
        return self._support(key, k, tuple(beta))

    def diffusion_matrix(self, t: float, x) -> np.ndarray:
        pts = points(x, self.N)
        A = np.empty(pts.shape[:-1] + (self.N, self.N))
        for i in range(self.N):
            for j in range(i, self.N):
                v = self.value(("a", i, j), t, pts)
                A[..., i, j] = v
                A[..., j, i] = v
        return A

    def is_periodic(self, length: float) -> bool:
        """Whether the coefficients are periodic with period ``length`` in every axis."""
        if self.translation_invariant:
            return True
        if self.period is None:
            return False
        ratio = length / self.period
        return abs(ratio - round(ratio)) < 1e-12 and round(ratio) >= 1

    def check_ellipticity(self, samples: int = 10_000, seed: int = 0) -> float:
        """Sample ``(t, x)`` in the model box and return the smallest eigenvalue of ``a``."""
        worst, t, x = sample_min_eigenvalue(self, samples, seed)
        if not worst >= self.gamma * (1 - 1e-12):
            raise EllipticityError(
                f"ellipticity violated: min eigenvalue {worst:.6g} < gamma={self.gamma} "
                f"at t={t:.6g}, x={x}"
            )
        return worst

    # helpers -----------------------------------------------------------------
    def _beta(self, beta) -> tuple[int, ...]:
        if isinstance(beta, (int, np.integer)):
            beta = (int(beta),) if self.N == 1 else None
        if beta is None or len(beta) != self.N or any(b < 0 for b in beta):
            raise ModelError(f"spatial multi-index must have {self.N} nonnegative entries")
        return tuple(int(b) for b in beta)

    def _deriv(self, key, k, beta, t, x):  # pragma: no cover - abstract
        raise NotImplementedError

    def _support(self, key, k, beta) -> bool:
        return True


# --------------------------------------------------------------------------- builtins


def _is_const_slot(k: int, beta: tuple[int, ...]) -> bool:
    return k == 0 and not any(beta)


class ConstantModel(CoefficientModel):
    """Constant ``a`` (scalar times identity or a full matrix), ``b`` and ``c``."""

    def __init__(self, name: str, params: Mapping, a, b, c, N: int | None = None):
        a = np.asarray(a, dtype=float)
        if N is None:
            N = a.shape[0] if a.ndim == 2 else (np.size(b) if np.ndim(b) else 1)
        a = a * np.eye(N) if a.ndim == 0 else np.atleast_2d(a)
        b = np.broadcast_to(np.asarray(b, dtype=float), (N,)).copy()
        if a.shape != (N, N):
            raise ModelError(f"diffusion matrix shape {a.shape} does not match N={N}")
        if not np.allclose(a, a.T, rtol=0, atol=0):
            raise ModelError("diffusion matrix must be symmetric")
        eig = np.linalg.eigvalsh(a)
        if eig[0] <= 0:
            raise EllipticityError(f"diffusion matrix is not positive definite (eigenvalues {eig})")
        super().__init__(N, name, params, float(eig[0]), translation_invariant=True)
        self.a, self.b, self.c = a, b, float(c)

    def _support(self, key, k, beta):
        return _is_const_slot(k, beta) and self._const(key) != 0

    def _const(self, key):
        if key[0] == "a":
            return self.a[key[1], key[2]]
        if key[0] == "b":
            return self.b[key[1]]
        return self.c

    def _deriv(self, key, k, beta, t, x):
        return self._const(key)


class OUModel(CoefficientModel):
    """``D d^2 - kappa x d`` in one dimension."""

    def __init__(self, D: float, kappa: float):
        if not D > 0:
            raise ModelError("ou requires D > 0")
        super().__init__(1, "ou", {"D": D, "kappa": kappa}, D)
        self.D, self.kappa = float(D), float(kappa)

    def _support(self, key, k, beta):
        if k:
            return False
        if key[0] == "a":
            return beta == (0,)
        if key[0] == "b":
            return beta[0] <= 1 and self.kappa != 0
        return False

    def _deriv(self, key, k, beta, t, x):
        if key[0] == "a":
            return self.D
        return -self.kappa * x[..., 0] if beta == (0,) else -self.kappa


class SinDiffusionModel(CoefficientModel):
    """``a = 1 + eps sin(omega x)``, ``b = c = 0``."""

    def __init__(self, eps: float, omega: float):
        if abs(eps) >= 1:
            raise EllipticityError(f"sin_diffusion requires |eps| < 1, got {eps}")
        if omega <= 0:
            raise ModelError("sin_diffusion requires omega > 0")
        super().__init__(1, "sin_diffusion", {"eps": eps, "omega": omega}, 1 - abs(eps),
                         period=2 * math.pi / omega)
        self.eps, self.omega = float(eps), float(omega)

    def _support(self, key, k, beta):
        return key[0] == "a" and k == 0 and (beta == (0,) or self.eps != 0)

    def _deriv(self, key, k, beta, t, x):
        n = beta[0]
        val = self.eps * self.omega**n * np.sin(self.omega * x[..., 0] + n * math.pi / 2)
        return 1.0 + val if n == 0 else val


class TimeRampModel(CoefficientModel):
    """``a = a0 (1 + delta t)``, ``b = c = 0``."""

    def __init__(self, a0: float, delta: float, t_max: float = 1.0):
        lo = a0 * min(1.0, 1.0 + delta * t_max)
        if not (a0 > 0 and lo > 0):
            raise EllipticityError("time_ramp requires a0 > 0 and a0 (1 + delta t) > 0 on [0, t_max]")
        super().__init__(1, "time_ramp", {"a0": a0, "delta": delta}, lo, time_dependent=delta != 0,
                         translation_invariant=True, box={"t": [0.0, t_max], "x": [[-5.0, 5.0]]})
        self.a0, self.delta = float(a0), float(delta)

    def _support(self, key, k, beta):
        return key[0] == "a" and beta == (0,) and (k == 0 or (k == 1 and self.delta != 0))

    def _deriv(self, key, k, beta, t, x):
        return self.a0 * (1 + self.delta * t) if k == 0 else self.a0 * self.delta


BUILTIN_DEFAULTS: dict[str, dict] = {
    "const": {"a": 1.0, "b": 0.0, "c": 0.0, "N": 1},
    "drift": {"a": 1.0, "b": 1.0, "N": 1},
    "ou": {"D": 1.0, "kappa": 1.0},
    "sin_diffusion": {"eps": 0.3, "omega": 1.0},
    "time_ramp": {"a0": 1.0, "delta": 1.0},
    "bs_log": {"sigma": 0.2, "r": 0.05},
}


def builtin(model_id: str, params: Mapping | None = None) -> CoefficientModel:
    """One of the bundled models; missing parameters take the documented defaults."""
    if model_id not in BUILTIN_DEFAULTS:
        raise ModelError(f"unknown builtin model {model_id!r}; choose from {sorted(BUILTIN_DEFAULTS)}")
    given = dict(params or {})
    unknown = set(given) - set(BUILTIN_DEFAULTS[model_id])
    if unknown:
        raise ModelError(f"unknown parameter(s) {sorted(unknown)} for model {model_id!r}")
    p = {**BUILTIN_DEFAULTS[model_id], **given}
    try:
        if model_id == "const":
            N = int(p["N"])
            return ConstantModel("const", p, p["a"], p["b"], p["c"], N=N)
        if model_id == "drift":
            N = int(p["N"])
            return ConstantModel("drift", p, p["a"], p["b"], 0.0, N=N)
        if model_id == "ou":
            return OUModel(float(p["D"]), float(p["kappa"]))
        if model_id == "sin_diffusion":
            return SinDiffusionModel(float(p["eps"]), float(p["omega"]))
        if model_id == "time_ramp":
            return TimeRampModel(float(p["a0"]), float(p["delta"]))
        sigma, r = float(p["sigma"]), float(p["r"])
        if sigma == 0:
            raise EllipticityError("bs_log requires sigma != 0")
        return ConstantModel("bs_log", p, sigma**2 / 2, r - sigma**2 / 2, -r, N=1)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelError(f"invalid parameters for {model_id!r}: {exc}") from exc


# --------------------------------------------------------------------------- JSON models


class ExpressionModel(CoefficientModel):
    """Coefficients given as closed-form expressions in ``t, x1..xN``; derivatives are symbolic."""

    def __init__(self, N: int, exprs: Mapping[Key, object], gamma: float, box: Mapping, doc: Mapping):
        import sympy

        self._sympy = sympy
        self.t_sym = sympy.Symbol("t", real=True)
        self.x_syms = [sympy.Symbol(f"x{i + 1}", real=True) for i in range(N)]
        self.exprs = dict(exprs)
        time_dep = any(self.t_sym in e.free_symbols for e in self.exprs.values())
        super().__init__(N, "spec", doc, gamma, time_dependent=time_dep, box=box)
        self._cache: dict = {}

    def _derivative(self, key, k, beta):
        ck = (key, k, beta)
        hit = self._cache.get(ck)
        if hit is None:
            e = self.exprs[key]
            if k:
                e = self._sympy.diff(e, self.t_sym, k)
            for s, b in zip(self.x_syms, beta):
                if b:
                    e = self._sympy.diff(e, s, b)
            fn = self._sympy.lambdify([self.t_sym, *self.x_syms], e, modules="numpy")
            hit = (e, fn)
            self._cache[ck] = hit
        return hit

    def _support(self, key, k, beta):
        return self._derivative(key, k, beta)[0] != 0

    def _deriv(self, key, k, beta, t, x):
        _, fn = self._derivative(key, k, beta)
        return fn(t, *(x[..., i] for i in range(self.N)))


def _parse_expr(text, N: int):
    import sympy
    from sympy.parsing.sympy_parser import (
        convert_xor, parse_expr, standard_transformations,
    )

    if isinstance(text, (int, float)):
        return sympy.nsimplify(text) if isinstance(text, int) else sympy.Float(text)
    if not isinstance(text, str):
        raise ModelError(f"coefficient expression must be a string or number, got {text!r}")
    t = sympy.Symbol("t", real=True)
    xs = {f"x{i + 1}": sympy.Symbol(f"x{i + 1}", real=True) for i in range(N)}
    local = {"t": t, **xs, "sin": sympy.sin, "cos": sympy.cos, "exp": sympy.exp, "pi": sympy.pi}
    if N == 1:
        local["x"] = xs["x1"]
    glob = {"__builtins__": {}, "Integer": sympy.Integer, "Float": sympy.Float,
            "Rational": sympy.Rational, "Symbol": sympy.Symbol}
    try:
        expr = parse_expr(text, local_dict=local, global_dict=glob,
                          transformations=standard_transformations + (convert_xor,))
    except Exception as exc:  # sympy raises a zoo of exception types on bad input
        raise ModelError(f"cannot parse coefficient expression {text!r}: {exc}") from None
    allowed = {t, *xs.values()}
    stray = expr.free_symbols - allowed
    if stray:
        raise ModelError(f"unknown symbol(s) {sorted(map(str, stray))} in {text!r}")
    for f in expr.atoms(sympy.Function):
        if f.func not in (sympy.sin, sympy.cos, sympy.exp):
            raise ModelError(f"function {f.func} is not allowed in {text!r}")
    return expr


def from_spec(doc, *, samples: int = 10_000, seed: int = 0) -> CoefficientModel:
    """Build a model from a JSON document (string, path-free mapping) or a builtin reference.

    Either ``{"builtin": id, "params": {...}}`` or
    ``{"N": n, "a": [[expr]], "b": [expr], "c": expr, "gamma": g, "box": {...}}``.
    """
    import sympy

    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ModelError(f"model document is not valid JSON: {exc}") from None
    if not isinstance(doc, Mapping):
        raise ModelError("model document must be a JSON object")
    if "builtin" in doc:
        return builtin(doc["builtin"], doc.get("params"))
    try:
        N = int(doc["N"])
        a_rows = doc["a"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"model document needs 'N' and 'a': {exc}") from None
    if N < 1 or len(a_rows) != N or any(len(r) != N for r in a_rows):
        raise ModelError(f"'a' must be an {N}x{N} array of expressions")
    b_list = doc.get("b", ["0"] * N)
    if len(b_list) != N:
        raise ModelError(f"'b' must have {N} entries")
    a = [[_parse_expr(a_rows[i][j], N) for j in range(N)] for i in range(N)]
    for i in range(N):
        for j in range(i + 1, N):
            if sympy.simplify(a[i][j] - a[j][i]) != 0:
                raise ModelError(f"diffusion matrix is not symmetric: a{i + 1}{j + 1} != a{j + 1}{i + 1}")
    exprs: dict[Key, object] = {}
    for i in range(N):
        for j in range(i, N):
            exprs[("a", i, j)] = a[i][j]
        exprs[("b", i)] = _parse_expr(b_list[i], N)
    exprs[("c",)] = _parse_expr(doc.get("c", "0"), N)

    box = doc.get("box") or {}
    box = {"t": list(box.get("t", [0.0, 1.0])), "x": [list(r) for r in box.get("x", [[-5.0, 5.0]] * N)]}
    if len(box["x"]) != N:
        raise ModelError(f"'box.x' must have {N} intervals")
    gamma = doc.get("gamma")
    model = ExpressionModel(N, exprs, 1.0 if gamma is None else float(gamma), box, doc)
    if gamma is None:
        worst, t, x = sample_min_eigenvalue(model, samples, seed)
        if not worst > 0:
            raise EllipticityError(f"ellipticity violated: min eigenvalue {worst:.6g} at t={t:.6g}, x={x}")
        model.gamma = worst
    else:
        model.check_ellipticity(samples, seed)
    return model


def sample_min_eigenvalue(model: CoefficientModel, samples: int = 10_000,
                          seed: int = 0) -> tuple[float, float, list]:
    """Smallest eigenvalue of ``a`` over seeded uniform samples of the model box, with its location."""
    rng = np.random.default_rng(seed)
    lo_t, hi_t = model.box["t"]
    xs = np.stack([rng.uniform(lo, hi, samples) for lo, hi in model.box["x"]], axis=-1)
    ts = rng.uniform(lo_t, hi_t, samples) if model.time_dependent else np.full(samples, lo_t)
    if model.time_dependent:
        eig = np.array([np.linalg.eigvalsh(model.diffusion_matrix(tt, xx))[0] for tt, xx in zip(ts, xs)])
    else:
        eig = np.linalg.eigvalsh(model.diffusion_matrix(lo_t, xs))[..., 0]
    i = int(np.argmin(eig))
    return float(eig[i]), float(ts[i]), xs[i].tolist()


# --------------------------------------------------------------------------- finite differences


@lru_cache(maxsize=None)
def central_stencil(order: int) -> tuple[tuple[int, Fraction], ...]:
    """Second-order accurate central stencil ``((offset, weight), ...)`` for ``d^order``."""
    if order == 0:
        return ((0, Fraction(1)),)
    p = (order + 1) // 2
    offs = list(range(-p, p + 1))
    n = len(offs)
    # solve sum_j w_j j^q / q! = delta_{q, order} exactly
    M = [[Fraction(j) ** q / math.factorial(q) for j in offs] for q in range(n)]
    rhs = [Fraction(int(q == order)) for q in range(n)]
    for col in range(n):
        piv = next(r for r in range(col, n) if M[r][col] != 0)
        M[col], M[piv] = M[piv], M[col]
        rhs[col], rhs[piv] = rhs[piv], rhs[col]
        for r in range(n):
            if r != col and M[r][col] != 0:
                f = M[r][col] / M[col][col]
                M[r] = [a - f * b for a, b in zip(M[r], M[col])]
                rhs[r] -= f * rhs[col]
    w = [rhs[i] / M[i][i] for i in range(n)]
    return tuple((o, wi) for o, wi in zip(offs, w) if wi != 0)


def fd_derivative(f: Callable, k: int, beta: tuple[int, ...], t: float, x, h: float) -> np.ndarray:
    """Tensor-product central difference of ``f(t, x)``: ``k`` in time, ``beta`` in space."""
    x = np.asarray(x, dtype=float)
    N = x.shape[-1]
    stencils = [central_stencil(k)] + [central_stencil(b) for b in beta]
    acc = 0.0
    for combo in product(*stencils):
        w = 1.0
        shift = np.zeros(N)
        for axis, (off, wi) in enumerate(combo):
            w *= float(wi)
            if axis:
                shift[axis - 1] = off * h
        val = np.asarray(f(t + combo[0][0] * h, x + shift), dtype=float)
        if not np.all(np.isfinite(val)):
            raise NumericalError(f"coefficient evaluator returned a non-finite value near t={t}")
        acc = acc + w * val
    return acc / h ** (k + sum(beta))


class FiniteDifferenceModel(CoefficientModel):
    """Black-box coefficients with derivatives from central differences (accuracy O(h^2))."""

    def __init__(self, coeffs: Mapping, N: int, h: float, gamma: float, name: str = "fd",
                 time_dependent: bool = True):
        if not h > 0:
            raise ModelError("finite-difference step must be positive")
        self.funcs = {parse_key(k, N): f for k, f in coeffs.items()}
        for i in range(N):
            if ("a", i, i) not in self.funcs:
                raise ModelError(f"missing diagonal diffusion coefficient a{i + 1}{i + 1}")
        super().__init__(N, name, {"h": h, "keys": sorted(map(str, self.funcs))}, gamma,
                         time_dependent=time_dependent)
        self.h = float(h)

    def _support(self, key, k, beta):
        return key in self.funcs

    def _deriv(self, key, k, beta, t, x):
        return fd_derivative(self.funcs[key], k, beta, t, x, self.h)


def fd_adapter(f, N: int = 1, h: float = 1e-4, gamma: float = 1.0, **kw) -> CoefficientModel:
    """Wrap coefficient evaluators ``f[key](t, x)`` (or a single diffusion callable for N = 1)."""
    if callable(f):
        f = {("a", 0, 0): f}
    return FiniteDifferenceModel(f, N, h, gamma, **kw)


def underlying_functions(model: CoefficientModel) -> dict[Key, Callable]:
    """Plain coefficient evaluators of a model, for cross-checking derivatives by differences."""
    return {key: (lambda t, x, key=key: model.value(key, t, x)) for key in coefficient_keys(model.N)}
