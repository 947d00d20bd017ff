"""Gaussian kernel of a frozen constant-coefficient operator ``sum A_ij d_i d_j``.

``G_A(u) = (4 pi)^(-N/2) det(A)^(-1/2) exp(-u^T A^{-1} u / 4)`` is the unit-time
kernel. Derivatives of it are written as polynomial prefactors times ``G_A``;
the prefactors come from the recursion ``h_{g+e_i} = d_{u_i} h_g - (A^{-1} u)_i / 2 * h_g``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DomainError, EllipticityError, StructuralError
from .polyalg import Alphabet, DiffOp, MultiPoly, rational

SYM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class EllipticFreeze:
    """Diffusion matrix frozen at one point together with its inverse and determinant."""

    A: np.ndarray
    invA: np.ndarray
    detA: float
    gamma_min: float
    chol: np.ndarray = field(repr=False)

    @classmethod
    def from_matrix(cls, A, gamma: float | None = None) -> "EllipticFreeze":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise StructuralError(f"diffusion matrix must be square, got shape {A.shape}")
        if not np.all(np.isfinite(A)):
            raise EllipticityError("diffusion matrix has non-finite entries")
        if np.max(np.abs(A - A.T), initial=0.0) > SYM_TOL * max(1.0, np.max(np.abs(A))):
            raise EllipticityError("diffusion matrix is not symmetric")
        A = 0.5 * (A + A.T)
        try:
            chol = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            raise EllipticityError(f"diffusion matrix is not positive definite: {A.tolist()}") from None
        gmin = float(np.linalg.eigvalsh(A)[0])
        if gmin <= 0 or (gamma is not None and gmin < gamma):
            raise EllipticityError(
                f"smallest eigenvalue {gmin:.6g} of the diffusion matrix is below gamma={gamma}"
            )
        eye = np.eye(A.shape[0])
        invA = np.linalg.solve(A, eye)
        invA = 0.5 * (invA + invA.T)
        detA = float(np.prod(np.diag(chol)) ** 2)
        for arr in (A, invA, chol):
            arr.setflags(write=False)
        return cls(A, invA, detA, gmin, chol)

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def lambda_max(self) -> float:
        return float(np.linalg.eigvalsh(self.A)[-1])


def gaussian_eval(frz: EllipticFreeze, tau: float, u) -> np.ndarray | float:
    """Heat kernel of the frozen operator after time ``tau``, at displacement(s) ``u``.

    ``u`` has shape ``(..., N)`` (a scalar is accepted when N = 1).
    """
    if not tau > 0:
        raise DomainError(f"kernel time must be positive, got {tau}")
    u = np.asarray(u, dtype=float)
    if frz.N == 1 and (u.ndim == 0 or u.shape[-1] != 1):
        u = u[..., None]
    quad = np.einsum("...i,ij,...j->...", u, frz.invA, u)
    norm = (4.0 * math.pi * tau) ** (-frz.N / 2) / math.sqrt(frz.detA)
    out = norm * np.exp(-quad / (4.0 * tau))
    return float(out) if out.ndim == 0 else out


def gaussian_batch(invA: np.ndarray, detA: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Unit-time kernel with a different frozen matrix per point.

    ``invA`` is ``(..., N, N)``, ``detA`` is ``(...)`` and ``u`` is ``(..., N)``.
    """
    N = u.shape[-1]
    quad = np.einsum("...i,...ij,...j->...", u, invA, u)
    return (4.0 * math.pi) ** (-N / 2) / np.sqrt(detA) * np.exp(-0.25 * quad)


# --------------------------------------------------------------------------- prefactors


def u_names(N: int) -> tuple[str, ...]:
    return tuple(f"u{i + 1}" for i in range(N))


def inverse_param_names(N: int) -> dict[tuple[int, int], str]:
    """Names of the symbolic entries of ``A^{-1}``; symmetric pairs share one name."""
    return {(i, j): f"B{min(i, j) + 1}{max(i, j) + 1}" for i in range(N) for j in range(N)}


def with_gaussian_vars(alphabet: Alphabet) -> Alphabet:
    """``alphabet`` extended by the Gaussian argument ``u1..uN`` if missing."""
    extra = tuple(n for n in u_names(alphabet.N) if n not in alphabet)
    if not extra:
        return alphabet
    return Alphabet(alphabet.spatial, alphabet.scalar, alphabet.aux + extra)


class HermiteTable:
    """Prefactors ``h_gamma`` over a fixed alphabet and inverse matrix, built lazily."""

    def __init__(self, alphabet: Alphabet, B: Sequence[Sequence[MultiPoly]]):
        self.alphabet = alphabet
        N = alphabet.N
        us = [MultiPoly.var(alphabet, n) for n in u_names(N)]
        # (A^{-1} u)_i / 2
        self._half_Bu = []
        for i in range(N):
            acc = MultiPoly.zero(alphabet)
            for j in range(N):
                acc = acc + B[i][j] * us[j]
            self._half_Bu.append(acc.scale(rational(0.5)))
        self._u_names = u_names(N)
        self._table: dict[tuple[int, ...], MultiPoly] = {(0,) * N: MultiPoly.one(alphabet)}

    @classmethod
    def numeric(cls, alphabet: Alphabet, invA) -> "HermiteTable":
        invA = np.atleast_2d(np.asarray(invA, dtype=float))
        B = [[MultiPoly.const(alphabet, invA[i, j]) for j in range(alphabet.N)]
             for i in range(alphabet.N)]
        return cls(alphabet, B)

    @classmethod
    def symbolic(cls, alphabet: Alphabet) -> "HermiteTable":
        names = inverse_param_names(alphabet.N)
        B = [[MultiPoly.var(alphabet, names[i, j]) for j in range(alphabet.N)]
             for i in range(alphabet.N)]
        return cls(alphabet, B)

    def __getitem__(self, gamma: tuple[int, ...]) -> MultiPoly:
        gamma = tuple(gamma)
        hit = self._table.get(gamma)
        if hit is not None:
            return hit
        # peel the last nonzero index
        i = max(k for k, g in enumerate(gamma) if g)
        prev = gamma[:i] + (gamma[i] - 1,) + gamma[i + 1:]
        hp = self[prev]
        h = hp.diff(self._u_names[i]) - self._half_Bu[i] * hp
        self._table[gamma] = h
        return h


def hermite_prefactor(gamma: Sequence[int], invA) -> MultiPoly:
    """``h_gamma(u)`` for a numeric inverse matrix, over the alphabet ``u1..uN``."""
    invA = np.atleast_2d(np.asarray(invA, dtype=float))
    N = invA.shape[0]
    al = Alphabet(tuple(f"xi{i + 1}" for i in range(N)), (), u_names(N))
    return HermiteTable.numeric(al, invA)[tuple(gamma)]


@dataclass(frozen=True)
class GaussianDerivTerm:
    """``prefactor(xi, u) * G_A(u)`` at unit time."""

    prefactor: MultiPoly
    base: EllipticFreeze

    def evaluate(self, xi, u) -> np.ndarray | float:
        """Value at offsets ``xi`` and displacements ``u``, each of shape ``(..., N)``."""
        xi = np.asarray(xi, dtype=float)
        u = np.asarray(u, dtype=float)
        N = self.base.N
        if N == 1:
            if xi.ndim == 0 or xi.shape[-1] != 1:
                xi = xi[..., None]
            if u.ndim == 0 or u.shape[-1] != 1:
                u = u[..., None]
        al = self.prefactor.alphabet
        values = {}
        for i in range(N):
            values[al.spatial[i]] = xi[..., i]
            values[f"u{i + 1}"] = u[..., i]
        return self.prefactor.evaluate(values) * gaussian_eval(self.base, 1.0, u)


_TIME_LIKE_ERROR = "operator still depends on time-like variables {}; integrate them out first"


def gaussian_prefactors(P: DiffOp, table: HermiteTable) -> list[tuple[tuple[int, ...], MultiPoly]]:
    """``[(gamma, p_gamma(xi) * h_gamma(u))]`` for every term of ``P``, in canonical order."""
    al = table.alphabet
    P = P.embed(al)
    leftover = P.variables() & set(al.scalar)
    if leftover:
        raise StructuralError(_TIME_LIKE_ERROR.format(sorted(leftover)))
    return [(gamma, coeff * table[gamma]) for gamma, coeff in P.sorted_terms()]


def apply_diffop_to_gaussian(P: DiffOp, frz: EllipticFreeze) -> list[GaussianDerivTerm]:
    """Kernel of ``P e^{L_0}`` as a list of prefactor-times-Gaussian terms, one per term of ``P``."""
    if P.alphabet.N != frz.N:
        raise StructuralError(f"operator dimension {P.alphabet.N} != freeze dimension {frz.N}")
    leftover = P.variables() & set(P.alphabet.scalar)
    if leftover:
        raise StructuralError(_TIME_LIKE_ERROR.format(sorted(leftover)))
    al = with_gaussian_vars(P.alphabet)
    table = HermiteTable.numeric(al, frz.invA)
    return [GaussianDerivTerm(p, frz) for _, p in gaussian_prefactors(P, table)]


# --------------------------------------------------------------------------- quadrature helpers (1D)


@lru_cache(maxsize=8)
def _gauss_hermite(n: int):
    return np.polynomial.hermite.hermgauss(n)


def heat_semigroup_1d(a: float, theta: float, g: Callable[[np.ndarray], np.ndarray], x,
                      nodes: int = 160) -> np.ndarray:
    """``(e^{theta a d^2} g)(x)`` by Gauss-Hermite quadrature against the heat kernel."""
    x = np.asarray(x, dtype=float)
    if theta == 0:
        return np.asarray(g(x), dtype=float)
    if theta < 0 or a <= 0:
        raise DomainError("backward heat flow is not defined")
    nu, w = _gauss_hermite(nodes)
    scale = math.sqrt(4.0 * a * theta)
    pts = x[..., None] - scale * nu
    return np.sum(w * g(pts), axis=-1) / math.sqrt(math.pi)


def gaussian_derivatives(x, k_max: int, width: float = 1.0, amplitude: float = 1.0) -> list[np.ndarray]:
    """Derivatives ``0..k_max`` of ``amplitude * exp(-(x / width)^2)``.

    Uses ``d^k exp(-s^2) = (-1)^k H_k(s) exp(-s^2)`` with physicists' Hermite ``H_k``.
    """
    s = np.asarray(x, dtype=float) / width
    base = amplitude * np.exp(-s * s)
    h_prev, h = np.ones_like(s), 2.0 * s
    out = [base]
    for k in range(1, k_max + 1):
        if k > 1:
            h_prev, h = h, 2.0 * s * h - 2.0 * (k - 1) * h_prev
        out.append((-1) ** k * h * base / width**k)
    return out


def apply_diffop_numeric_1d(P: DiffOp, derivs: Callable[[np.ndarray, int], list], x,
                            values: Mapping[str, float] | None = None) -> np.ndarray:
    """``(P f)(x)`` for a 1D operator with ``xi := x``; ``derivs(x, k)`` returns ``f, f', .., f^(k)``."""
    if P.alphabet.N != 1:
        raise StructuralError("numeric application is implemented for N = 1")
    x = np.asarray(x, dtype=float)
    if P.is_zero():
        return np.zeros_like(x)
    ds = derivs(x, P.order())
    vals = dict(values or {})
    vals[P.alphabet.spatial[0]] = x
    out = np.zeros_like(x)
    for (g,), coeff in P.sorted_terms():
        out = out + coeff.evaluate(vals) * ds[g]
    return out
