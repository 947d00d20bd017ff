"""Order-m Green function approximation by Dyson-Taylor commutators.

Pipeline, for a freeze point ``(t', z)``:

1. Taylor terms ``L_m`` of the parabolically rescaled operator (polynomial in ``xi`` and ``t``).
2. Pulled-through operators ``P_m(sigma) = exp_ad((1 - sigma) L_0, L_m(sigma))``.
3. ``Lambda_alpha`` = products ``P_{alpha_1}(sigma_1) ... P_{alpha_k}(sigma_k)`` integrated over the
   ordered simplex ``1 >= sigma_1 >= ... >= sigma_k >= 0``; ``Lambda^l`` sums them over
   compositions of ``l``.
4. ``Lambda^l e^{L_0}`` applied to the Gaussian gives polynomial prefactors ``Q_l(xi, u)``, and
   ``G^[m](x, y) = sum_l tau^((l - N)/2) Q_l(xi', u') G_A(u')`` with
   ``xi' = (x - z)/sqrt(tau)``, ``u' = (x - y)/sqrt(tau)``.

Two routes produce step 4. :func:`assemble` runs the pipeline in exact rationals for one
numeric freeze point. :class:`ExpansionTemplate` runs it once with the coefficient jets and
``A^{-1}`` kept as symbols, then evaluates the result for many freeze points at once; this
is what :class:`KernelEvaluator` and the stepper use.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DomainError, EllipticityError, OrderError, StructuralError
from .heatkernel import (
    EllipticFreeze,
    GaussianDerivTerm,
    HermiteTable,
    apply_diffop_to_gaussian,
    gaussian_batch,
    gaussian_prefactors,
    inverse_param_names,
    u_names,
)
from .models import CoefficientModel, Key, coefficient_keys, points
from .polyalg import Alphabet, DiffOp, MultiPoly, exp_ad, rational

MAX_ORDER = 4
T_MIN = 1e-12

# extra weight of each coefficient family in the rescaled operator: a ~ s^0, b ~ s^1, c ~ s^2
_FAMILY_SHIFT = {"a": 0, "b": 1, "c": 2}


def multi_indices(N: int, total: int) -> list[tuple[int, ...]]:
    """All ``beta`` in Z_+^N with ``|beta| = total``, lexicographically descending."""
    if N == 1:
        return [(total,)]
    out = []
    for first in range(total, -1, -1):
        out += [(first,) + rest for rest in multi_indices(N - 1, total - first)]
    return out


def jets_for_order(N: int, n: int) -> list[tuple[Key, int, tuple[int, ...]]]:
    """Every ``(key, k, beta)`` that can enter ``L_1..L_n`` or ``L_0``."""
    out = []
    for key in coefficient_keys(N):
        budget = n - _FAMILY_SHIFT[key[0]]
        for w in range(budget + 1):
            for k in range(w // 2 + 1):
                for beta in multi_indices(N, w - 2 * k):
                    out.append((key, k, beta))
    return out


def jet_name(key: Key, k: int, beta: tuple[int, ...]) -> str:
    idx = "".join(str(i + 1) for i in key[1:])
    return f"{key[0]}{idx}_t{k}_x{''.join(map(str, beta))}"


def _xi_monomial(alphabet: Alphabet, beta: tuple[int, ...]) -> MultiPoly:
    return MultiPoly.monomial(alphabet, {alphabet.spatial[i]: b for i, b in enumerate(beta) if b})


def build_taylor_ops(alphabet: Alphabet, n: int,
                     jet: Callable[[Key, int, tuple[int, ...]], MultiPoly | None]) -> list[DiffOp]:
    """``[L_0, ..., L_n]`` with coefficient derivatives supplied by ``jet``.

    ``L_m`` collects ``d_t^k d^beta a_ij t^k xi^beta / (k! beta!)`` with ``2k + |beta| = m`` on
    ``d_i d_j`` (both orderings of an off-diagonal pair), the same with ``m - 1`` for ``b_i d_i``
    and ``m - 2`` for ``c``.
    """
    N = alphabet.N
    t = MultiPoly.var(alphabet, "t")
    ops = []
    for m in range(n + 1):
        terms: dict[tuple[int, ...], MultiPoly] = {}
        for key in coefficient_keys(N):
            w = m - _FAMILY_SHIFT[key[0]]
            if w < 0:
                continue
            if key[0] == "a":
                i, j = key[1], key[2]
                gamma = [0] * N
                gamma[i] += 1
                gamma[j] += 1
                mult = 1 if i == j else 2
            elif key[0] == "b":
                gamma = [0] * N
                gamma[key[1]] = 1
                mult = 1
            else:
                gamma, mult = [0] * N, 1
            gamma = tuple(gamma)
            for k in range(w // 2 + 1):
                for beta in multi_indices(N, w - 2 * k):
                    c = jet(key, k, beta)
                    if c is None or c.is_zero():
                        continue
                    denom = math.factorial(k) * math.prod(math.factorial(b) for b in beta)
                    term = c * (t**k) * _xi_monomial(alphabet, beta)
                    term = term.scale(rational(mult) / denom)
                    terms[gamma] = terms[gamma] + term if gamma in terms else term
        ops.append(DiffOp(alphabet, terms))
    return ops


@dataclass(frozen=True, eq=False)
class TaylorFamily:
    """``[L_0, ..., L_n]`` at one freeze point, plus memoised pulled-through operators."""

    N: int
    z: tuple | None
    t_base: float | None
    ops: tuple[DiffOp, ...]
    alphabet: Alphabet
    _memo: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def n(self) -> int:
        return len(self.ops) - 1

    def __getitem__(self, m: int) -> DiffOp:
        return self.ops[m]


def _standard_alphabet(N: int, n: int, params: Iterable[str] = ()) -> Alphabet:
    return Alphabet.standard(N, n_sigma=max(n, 1), aux=u_names(N) + tuple(params))


def taylor_terms(model: CoefficientModel, z, t_base: float, n: int) -> TaylorFamily:
    """Numeric Taylor family of ``model`` frozen at ``(t_base, z)``; coefficients are exact rationals."""
    if n < 0:
        raise OrderError("expansion order must be nonnegative")
    z = points(z, model.N).reshape(model.N)
    EllipticFreeze.from_matrix(model.diffusion_matrix(t_base, z))  # rejects a non-elliptic freeze point
    al = _standard_alphabet(model.N, n)

    def jet(key, k, beta):
        if not model.support(key, k, beta):
            return None
        return MultiPoly.const(al, model.deriv(key, k, beta, t_base, z))

    ops = build_taylor_ops(al, n, jet)
    return TaylorFamily(model.N, tuple(float(v) for v in z), float(t_base), tuple(ops), al)


def p_operator(fam: TaylorFamily, m: int, sigma: str = "t") -> DiffOp:
    """``P_m(sigma) = exp_ad((1 - sigma) L_0, L_m with t := sigma)``; ``sigma`` names the variable."""
    if not 1 <= m <= fam.n:
        raise OrderError(f"P_{m} needs 1 <= m <= {fam.n}")
    key = ("P", m)
    with fam._lock:
        P = fam._memo.get(key)
    if P is None:
        al = fam.alphabet
        theta = MultiPoly.var(al, "theta")
        P = exp_ad(fam.ops[0], fam.ops[m], theta).substitute("theta", 1 - MultiPoly.var(al, "t"))
        with fam._lock:
            fam._memo[key] = P
    if sigma != "t":
        P = P.map_coefficients(lambda c: c.rename({"t": sigma}))
    return P


def enumerate_compositions(k: int, ell: int) -> list[tuple[int, ...]]:
    """Compositions of ``ell`` into ``k`` parts, each at least 1, in lexicographic order."""
    if k < 1 or ell < 0:
        raise OrderError("need k >= 1 and ell >= 0")
    if ell < k:
        return []
    if k == 1:
        return [(ell,)]
    out = []
    for first in range(1, ell - k + 2):
        out += [(first,) + rest for rest in enumerate_compositions(k - 1, ell - first)]
    return out


def sigma_name(j: int) -> str:
    return f"sigma{j}"


def simplex_integrate_poly(p: MultiPoly, k: int) -> MultiPoly:
    """Integrate over ``1 >= sigma_1 >= ... >= sigma_k >= 0``, innermost variable first."""
    al = p.alphabet
    idx = [al.index(sigma_name(j)) for j in range(1, k + 1)]
    out: dict = {}
    for e, c in p.terms.items():
        e = list(e)
        coeff = c
        carry = 0
        for j in reversed(range(k)):
            power = e[idx[j]] + carry
            coeff = coeff / (power + 1)
            carry = power + 1
            e[idx[j]] = 0
        key = tuple(e)
        out[key] = out.get(key, 0) + coeff
    res = MultiPoly(al, out)
    stray = {n for n in res.variables() if n.startswith("sigma")}
    if stray:
        raise StructuralError(f"simplex variables {sorted(stray)} survived integration over {k} levels")
    return res


def simplex_integrate(P: DiffOp, k: int) -> DiffOp:
    return P.map_coefficients(lambda c: simplex_integrate_poly(c, k))


def lambda_alpha(fam: TaylorFamily, alpha: Sequence[int]) -> DiffOp:
    """Simplex integral of ``P_{alpha_1}(sigma_1) o ... o P_{alpha_k}(sigma_k)``."""
    alpha = tuple(alpha)
    if not alpha or any(a < 1 for a in alpha):
        raise OrderError(f"composition parts must be >= 1, got {alpha}")
    if max(alpha) > fam.n:
        raise OrderError(f"composition {alpha} needs Taylor terms beyond L_{fam.n}")
    if len(alpha) > len([s for s in fam.alphabet.scalar if s.startswith("sigma")]):
        raise OrderError(f"alphabet has too few simplex variables for {alpha}")
    key = ("alpha", alpha)
    with fam._lock:
        hit = fam._memo.get(key)
    if hit is not None:
        return hit
    prod = p_operator(fam, alpha[0], sigma_name(1))
    for j, a in enumerate(alpha[1:], start=2):
        prod = prod @ p_operator(fam, a, sigma_name(j))
    out = simplex_integrate(prod, len(alpha))
    with fam._lock:
        fam._memo[key] = out
    return out


def lambda_ell(fam: TaylorFamily, ell: int, cap_k: int | None = None) -> DiffOp:
    """``Lambda^ell`` operator part: sum over levels ``k <= min(ell, cap_k)`` and compositions."""
    if ell < 0 or ell > fam.n:
        raise OrderError(f"Lambda^{ell} needs 0 <= ell <= {fam.n}")
    if ell == 0:
        return DiffOp.identity(fam.alphabet)
    cap = ell if cap_k is None else min(ell, cap_k)
    total = DiffOp.zero(fam.alphabet)
    for k in range(1, cap + 1):
        for alpha in enumerate_compositions(k, ell):
            total = total + lambda_alpha(fam, alpha)
    return total


# --------------------------------------------------------------------------- z policies


@dataclass(frozen=True)
class ZPolicy:
    """Freeze point ``z = lam x + (1 - lam) y``: ``left`` is lam = 1, ``mid`` is lam = 1/2."""

    kind: str = "mid"
    lam: float = 0.5

    @classmethod
    def left(cls) -> "ZPolicy":
        return cls("left", 1.0)

    @classmethod
    def midpoint(cls) -> "ZPolicy":
        return cls("mid", 0.5)

    @classmethod
    def convex(cls, lam: float) -> "ZPolicy":
        if not 0.0 <= lam <= 1.0:
            raise DomainError(f"convex policy weight must lie in [0, 1], got {lam}")
        return cls("convex", float(lam))

    @classmethod
    def parse(cls, text: str) -> "ZPolicy":
        text = text.strip().lower()
        if text == "left":
            return cls.left()
        if text in ("mid", "midpoint"):
            return cls.midpoint()
        if text.startswith("convex:"):
            try:
                return cls.convex(float(text.split(":", 1)[1]))
            except ValueError:
                pass
        raise ValueError(f"unknown z-policy {text!r}; use left, mid or convex:<lambda>")

    def __call__(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.lam == 1.0:
            return x.copy()
        if self.lam == 0.5:
            return 0.5 * (x + y)
        return self.lam * x + (1.0 - self.lam) * y

    def __str__(self) -> str:
        return self.kind if self.kind != "convex" else f"convex:{self.lam:g}"


# --------------------------------------------------------------------------- exact assembly


@dataclass(frozen=True, eq=False)
class KernelExpansion:
    """Assembled order-m kernel at one freeze point; ``terms[l]`` realises ``Lambda^l``."""

    m: int
    terms: tuple[tuple[GaussianDerivTerm, ...], ...]
    frz: EllipticFreeze
    z: tuple
    t_base: float
    operators: tuple[DiffOp, ...]

    def prefactor(self, ell: int) -> MultiPoly:
        """``Q_ell(xi, u)``: the sum of the prefactors of ``terms[ell]``."""
        out = None
        for term in self.terms[ell]:
            out = term.prefactor if out is None else out + term.prefactor
        if out is None:
            return MultiPoly.zero(self.terms[0][0].prefactor.alphabet)
        return out

    def evaluate(self, tau: float, x, y) -> np.ndarray | float:
        """``G^[m]`` at physical points with this expansion's freeze point."""
        _check_tau(tau)
        N = self.frz.N
        x = points(x, N)
        y = points(y, N)
        s = math.sqrt(tau)
        xi = (x - np.asarray(self.z)) / s
        u = (x - y) / s
        total = 0.0
        for ell, group in enumerate(self.terms):
            scale = tau ** ((ell - N) / 2)
            for term in group:
                total = total + scale * term.evaluate(xi, u)
        return total


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise DomainError("t must exceed t0")
    if tau < T_MIN:
        raise DomainError(f"t - t0 = {tau:.3g} is below the underflow guard {T_MIN:g}")


def _check_order(m: int, max_order: int) -> None:
    if m < 0:
        raise OrderError("expansion order must be nonnegative")
    if m > max_order:
        raise OrderError(f"order {m} exceeds the configured maximum {max_order}")


def assemble(model: CoefficientModel, z, t_base: float, m: int, *,
             max_order: int = MAX_ORDER) -> KernelExpansion:
    """Exact-rational assembly of the order-m kernel frozen at ``(t_base, z)``."""
    _check_order(m, max_order)
    fam = taylor_terms(model, z, t_base, m)
    frz = EllipticFreeze.from_matrix(model.diffusion_matrix(t_base, np.asarray(fam.z)))
    ops = tuple(lambda_ell(fam, ell) for ell in range(m + 1))
    terms = tuple(tuple(apply_diffop_to_gaussian(op, frz)) for op in ops)
    return KernelExpansion(m, terms, frz, fam.z, fam.t_base, ops)


# --------------------------------------------------------------------------- symbolic template


class ExpansionTemplate:
    """The pipeline run once with symbolic coefficient jets and symbolic ``A^{-1}``.

    ``Q_l`` is stored as a sparse map from ``(xi, u)`` monomials to polynomials in the
    parameters, so that binding numeric parameters for many freeze points is a pair of
    sparse products.
    """

    def __init__(self, N: int, m: int, support: Sequence[tuple[Key, int, tuple[int, ...]]]):
        self.N, self.m = N, m
        self.support = tuple(sorted(support, key=lambda s: (s[0], s[1], s[2])))
        for a_key in (("a", i, j) for i in range(N) for j in range(i, N)):
            if (a_key, 0, (0,) * N) not in self.support and a_key[1] == a_key[2]:
                raise StructuralError("diagonal diffusion entries must be in the jet support")
        self.jet_names = [jet_name(*s) for s in self.support]
        self.B_names = sorted(set(inverse_param_names(N).values()))
        self.param_names = tuple(self.jet_names + self.B_names)
        self.alphabet = _standard_alphabet(N, m, self.param_names)
        al = self.alphabet
        by_jet = {s: MultiPoly.var(al, name) for s, name in zip(self.support, self.jet_names)}
        ops = build_taylor_ops(al, m, lambda key, k, beta: by_jet.get((key, k, tuple(beta))))
        self.family = TaylorFamily(N, None, None, tuple(ops), al)
        self.operators = tuple(lambda_ell(self.family, ell) for ell in range(m + 1))
        table = HermiteTable.symbolic(al)
        self.prefactors: list[MultiPoly] = []
        for op in self.operators:
            q = MultiPoly.zero(al)
            for _, p in gaussian_prefactors(op, table):
                q = q + p
            self.prefactors.append(q)
        self._compile()

    def _compile(self) -> None:
        al = self.alphabet
        N = self.N
        pos_xi = [al.index(n) for n in al.spatial]
        pos_u = [al.index(n) for n in u_names(N)]
        pos_p = [al.index(n) for n in self.param_names]
        self.compiled = []
        for q in self.prefactors:
            groups: dict[tuple[int, ...], int] = {}
            rows, cols, vals, pexps = [], [], [], []
            for e, c in q.sorted_terms():
                g = tuple(e[i] for i in pos_xi) + tuple(e[i] for i in pos_u)
                gi = groups.setdefault(g, len(groups))
                rows.append(gi)
                cols.append(len(pexps))
                vals.append(float(c))
                pexps.append([e[i] for i in pos_p])
            nt = len(pexps)
            S = sp.csr_matrix((vals, (rows, cols)), shape=(len(groups), nt))
            mono = np.array(list(groups), dtype=int).reshape(len(groups), 2 * N)
            P = np.array(pexps, dtype=int).reshape(nt, len(pos_p))
            self.compiled.append((S, mono, P))

    def n_terms(self) -> list[int]:
        return [len(q) for q in self.prefactors]

    def bind_exact(self, values: dict[str, object]) -> list[MultiPoly]:
        """Substitute exact parameter values; returns ``Q_l`` as polynomials in ``(xi, u)``."""
        out = []
        for q in self.prefactors:
            for name in self.param_names:
                q = q.substitute(name, rational(values.get(name, 0)))
            out.append(q)
        return out

    def coefficients(self, params: np.ndarray) -> list[np.ndarray]:
        """Per-``l`` arrays ``(n_points, n_monomials)`` of ``(xi, u)`` coefficients."""
        params = np.asarray(params, dtype=float)
        out = []
        for S, _, P in self.compiled:
            if P.shape[0] == 0:
                out.append(np.zeros((params.shape[0], 0)))
                continue
            M = np.ones((P.shape[0], params.shape[0]))
            for j in range(P.shape[1]):
                col = P[:, j]
                for power in np.unique(col[col > 0]):
                    M[col == power] *= params[:, j] ** power
            out.append(np.asarray(S @ M).T)
        return out


def template_support(model: CoefficientModel, m: int) -> tuple:
    N = model.N
    diag = {(("a", i, i), 0, (0,) * N) for i in range(N)}
    return tuple(s for s in jets_for_order(N, m) if s in diag or model.support(*s))


class ExpansionCache:
    """Thread-safe memo for templates and exact assemblies.

    Values are pure functions of their keys, so a racing duplicate build is harmless.
    """

    def __init__(self):
        self._data: dict = {}
        self._lock = threading.Lock()

    def get(self, key, build: Callable[[], object]):
        with self._lock:
            if key in self._data:
                return self._data[key]
        value = build()
        with self._lock:
            return self._data.setdefault(key, value)

    def __len__(self) -> int:
        return len(self._data)

    def template(self, model: CoefficientModel, m: int) -> ExpansionTemplate:
        support = template_support(model, m)
        return self.get(("template", model.N, m, support), lambda: ExpansionTemplate(model.N, m, support))

    def expansion(self, model: CoefficientModel, z, t_base: float, m: int) -> KernelExpansion:
        z = tuple(float(v) for v in np.ravel(z))
        key = ("exact", model.id, np.asarray(z).tobytes(), float(t_base), m)
        return self.get(key, lambda: assemble(model, z, t_base, m))


DEFAULT_CACHE = ExpansionCache()


class KernelEvaluator:
    """Vectorised ``G^[m]_{t, t0}(x, y)`` for one model, order and z-policy."""

    def __init__(self, model: CoefficientModel, m: int, zp: ZPolicy | None = None,
                 cache: ExpansionCache | None = None, *, max_order: int = MAX_ORDER):
        _check_order(m, max_order)
        self.model = model
        self.m = m
        self.zp = zp if zp is not None else ZPolicy.midpoint()
        self.cache = cache if cache is not None else DEFAULT_CACHE
        self.template = self.cache.template(model, m)

    @property
    def time_homogeneous(self) -> bool:
        return not self.model.time_dependent

    def freeze_data(self, t0: float, z: np.ndarray):
        """Parameter rows, inverse matrices and determinants at freeze points ``z`` (shape ``(P, N)``)."""
        N = self.model.N
        cols = [np.broadcast_to(self.model.deriv(key, k, beta, t0, z), z.shape[:-1])
                for key, k, beta in self.template.support]
        A = self.model.diffusion_matrix(t0, z)
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            raise EllipticityError("diffusion matrix is not positive definite at a freeze point") from None
        detA = np.prod(np.diagonal(L, axis1=-2, axis2=-1), axis=-1) ** 2
        invA = np.linalg.inv(A)
        invA = 0.5 * (invA + np.swapaxes(invA, -1, -2))
        names = inverse_param_names(N)
        Bcols = {name: invA[..., i, j] for (i, j), name in names.items() if i <= j}
        cols += [Bcols[name] for name in self.template.B_names]
        params = np.stack(cols, axis=-1) if cols else np.zeros(z.shape[:-1] + (0,))
        return params, invA, detA

    def lambda_max(self, t0: float, pts) -> float:
        pts = points(pts, self.model.N).reshape(-1, self.model.N)
        return float(np.max(np.linalg.eigvalsh(self.model.diffusion_matrix(t0, pts))[..., -1]))

    def __call__(self, t0: float, t: float, x, y) -> np.ndarray:
        tau = float(t) - float(t0)
        _check_tau(tau)
        N = self.model.N
        x = points(x, N)
        y = points(y, N)
        x, y = np.broadcast_arrays(x, y)
        shape = x.shape[:-1]
        x = x.reshape(-1, N)
        y = y.reshape(-1, N)
        z = self.zp(x, y)
        zu, inv = np.unique(z, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        params, invA, detA = self.freeze_data(float(t0), zu)
        coeffs = self.template.coefficients(params)
        s = math.sqrt(tau)
        xi = (x - z) / s
        u = (x - y) / s
        base = gaussian_batch(invA[inv], detA[inv], u)
        vars_ = np.concatenate([xi, u], axis=-1)
        pw: dict[tuple[int, int], np.ndarray] = {}

        def power(j, p):
            key = (j, p)
            if key not in pw:
                pw[key] = vars_[:, j] ** p
            return pw[key]

        total = np.zeros(x.shape[0])
        for ell, (C, (_, mono, _)) in enumerate(zip(coeffs, self.template.compiled)):
            if C.shape[1] == 0:
                continue
            acc = np.zeros(x.shape[0])
            Cg = C[inv]
            for g in range(mono.shape[0]):
                term = Cg[:, g]
                for j, p in enumerate(mono[g]):
                    if p:
                        term = term * power(j, p)
                acc = acc + term
            total = total + tau ** ((ell - N) / 2) * acc
        return (total * base).reshape(shape)


def eval_kernel(model: CoefficientModel, m: int, zp: ZPolicy | None, t0: float, t: float, x, y,
                cache: ExpansionCache | None = None):
    """``G^[m]_{t, t0}(x, y)``; a float for one pair of points, else an array over the broadcast shape."""
    out = KernelEvaluator(model, m, zp, cache)(t0, t, x, y)
    return float(out) if np.ndim(out) == 0 else out
