"""Exact multivariate polynomials and differential operators with polynomial coefficients.

Everything here works over exact rationals. Floats are accepted as input but are
converted exactly (every finite double is a dyadic rational), so commutator chains
never lose digits to cancellation.

The spatial variables of an :class:`Alphabet` are the offsets ``xi_i = x_i - z_i``;
the derivative ``d_i`` of a :class:`DiffOp` differentiates with respect to them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product
from operator import add
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import NilpotencyError, ResourceError, StructuralError

try:
    from gmpy2 import mpq as _mpq
except ImportError:  # pragma: no cover - gmpy2 is a declared dependency
    _mpq = Fraction

Rational = type(_mpq(0))

DEFAULT_MAX_TERMS = 10**6
_max_terms = DEFAULT_MAX_TERMS


def set_max_terms(n: int) -> int:
    """Set the global operator size cap and return the previous value."""
    global _max_terms
    if n < 1:
        raise ValueError("term cap must be positive")
    old, _max_terms = _max_terms, int(n)
    return old


def get_max_terms() -> int:
    return _max_terms


def rational(x) -> Rational:
    """Convert ``x`` to an exact rational. Floats convert exactly; NaN/inf are rejected."""
    if isinstance(x, Rational):
        return x
    if isinstance(x, (bool, np.bool_)):
        return _mpq(int(x))
    if isinstance(x, (int, np.integer)):
        return _mpq(int(x))
    if isinstance(x, Fraction):
        return _mpq(x.numerator, x.denominator)
    if isinstance(x, (float, np.floating)):
        if not math.isfinite(x):
            raise ValueError(f"cannot convert non-finite value {x!r} to a rational")
        return _mpq(float(x))
    if isinstance(x, str):
        return rational(Fraction(x))
    raise TypeError(f"cannot convert {type(x).__name__} to a rational")


def _fmt_rational(c: Rational) -> str:
    n, d = int(c.numerator), int(c.denominator)
    return str(n) if d == 1 else f"{n}/{d}"


# --------------------------------------------------------------------------- alphabet


@dataclass(frozen=True)
class Alphabet:
    """Ordered variable set: spatial offsets first, then time-like scalars, then auxiliaries.

    Auxiliary variables carry anything that is neither a spatial offset nor a
    time-like variable, e.g. the Gaussian argument ``u`` or symbolic coefficient
    values.
    """

    spatial: tuple[str, ...]
    scalar: tuple[str, ...] = ()
    aux: tuple[str, ...] = ()
    _index: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        names = self.spatial + self.scalar + self.aux
        if len(set(names)) != len(names):
            raise StructuralError(f"duplicate variable names in alphabet {names}")
        object.__setattr__(self, "_index", {name: i for i, name in enumerate(names)})

    @classmethod
    def standard(cls, N: int, n_sigma: int = 0, aux: Iterable[str] = ()) -> "Alphabet":
        """``xi1..xiN`` ; ``t, theta, sigma1..sigma_k`` ; ``aux``."""
        spatial = tuple(f"xi{i + 1}" for i in range(N))
        scalar = ("t", "theta") + tuple(f"sigma{j + 1}" for j in range(n_sigma))
        return cls(spatial, scalar, tuple(aux))

    @property
    def names(self) -> tuple[str, ...]:
        return self.spatial + self.scalar + self.aux

    @property
    def N(self) -> int:
        return len(self.spatial)

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise StructuralError(f"variable {name!r} not in alphabet {self.names}") from None


def _check_same(a: Alphabet, b: Alphabet) -> None:
    if a is not b and a != b:
        raise StructuralError(f"alphabet mismatch: {a.names} vs {b.names}")


# --------------------------------------------------------------------------- polynomials


class MultiPoly:
    """Sparse multivariate polynomial with exact rational coefficients.

    Immutable. Terms are a mapping from exponent tuples (one entry per alphabet
    variable) to nonzero rationals.
    """

    __slots__ = ("alphabet", "_terms", "_hash")

    def __init__(self, alphabet: Alphabet, terms: Mapping | None = None, *, _trusted: bool = False):
        self.alphabet = alphabet
        self._hash = None
        if _trusted:
            self._terms = terms
            return
        clean = {}
        n = len(alphabet)
        for exps, c in (terms or {}).items():
            exps = tuple(int(e) for e in exps)
            if len(exps) != n or any(e < 0 for e in exps):
                raise StructuralError(f"bad exponent vector {exps} for alphabet {alphabet.names}")
            c = rational(c)
            if c:
                clean[exps] = clean.get(exps, 0) + c
        self._terms = {e: c for e, c in clean.items() if c}

    # constructors -----------------------------------------------------------
    @classmethod
    def zero(cls, alphabet: Alphabet) -> "MultiPoly":
        return cls(alphabet, {}, _trusted=True)

    @classmethod
    def const(cls, alphabet: Alphabet, c) -> "MultiPoly":
        c = rational(c)
        return cls(alphabet, {(0,) * len(alphabet): c} if c else {}, _trusted=True)

    @classmethod
    def one(cls, alphabet: Alphabet) -> "MultiPoly":
        return cls.const(alphabet, 1)

    @classmethod
    def var(cls, alphabet: Alphabet, name: str, power: int = 1) -> "MultiPoly":
        e = [0] * len(alphabet)
        e[alphabet.index(name)] = power
        return cls(alphabet, {tuple(e): _mpq(1)}, _trusted=True)

    @classmethod
    def monomial(cls, alphabet: Alphabet, powers: Mapping[str, int], coeff=1) -> "MultiPoly":
        e = [0] * len(alphabet)
        for name, p in powers.items():
            e[alphabet.index(name)] += int(p)
        return cls(alphabet, {tuple(e): coeff})

    # basic access -----------------------------------------------------------
    @property
    def terms(self) -> Mapping[tuple[int, ...], Rational]:
        return self._terms

    def __len__(self) -> int:
        return len(self._terms)

    def __bool__(self) -> bool:
        return bool(self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    def is_constant(self) -> bool:
        return not self._terms or (len(self._terms) == 1 and not any(next(iter(self._terms))))

    def constant_term(self) -> Rational:
        return self._terms.get((0,) * len(self.alphabet), _mpq(0))

    def sorted_terms(self) -> list[tuple[tuple[int, ...], Rational]]:
        """Terms in graded lexicographic order (total degree, then exponent tuple)."""
        return sorted(self._terms.items(), key=lambda kv: (sum(kv[0]), kv[0]))

    def __iter__(self) -> Iterator[tuple[tuple[int, ...], Rational]]:
        return iter(self.sorted_terms())

    def degree(self) -> int:
        """Total degree; -1 for the zero polynomial."""
        return max((sum(e) for e in self._terms), default=-1)

    def degree_in(self, names: Iterable[str]) -> int:
        idx = [self.alphabet.index(n) for n in names]
        return max((sum(e[i] for i in idx) for e in self._terms), default=-1)

    def spatial_degree(self) -> int:
        N = self.alphabet.N
        return max((sum(e[:N]) for e in self._terms), default=-1)

    def variables(self) -> set[str]:
        names = self.alphabet.names
        return {names[i] for e in self._terms for i, p in enumerate(e) if p}

    # arithmetic -------------------------------------------------------------
    def _coerce(self, other) -> "MultiPoly":
        if isinstance(other, MultiPoly):
            _check_same(self.alphabet, other.alphabet)
            return other
        return MultiPoly.const(self.alphabet, other)

    def __add__(self, other) -> "MultiPoly":
        other = self._coerce(other)
        if not other._terms:
            return self
        out = dict(self._terms)
        for e, c in other._terms.items():
            v = out.get(e, 0) + c
            if v:
                out[e] = v
            else:
                out.pop(e, None)
        return MultiPoly(self.alphabet, out, _trusted=True)

    __radd__ = __add__

    def __neg__(self) -> "MultiPoly":
        return MultiPoly(self.alphabet, {e: -c for e, c in self._terms.items()}, _trusted=True)

    def __sub__(self, other) -> "MultiPoly":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "MultiPoly":
        return self._coerce(other) - self

    def scale(self, c) -> "MultiPoly":
        c = rational(c)
        if not c:
            return MultiPoly.zero(self.alphabet)
        return MultiPoly(self.alphabet, {e: v * c for e, v in self._terms.items()}, _trusted=True)

    def __mul__(self, other) -> "MultiPoly":
        if not isinstance(other, MultiPoly):
            return self.scale(other)
        _check_same(self.alphabet, other.alphabet)
        a, b = self._terms, other._terms
        if not a or not b:
            return MultiPoly.zero(self.alphabet)
        if len(a) < len(b):
            a, b = b, a
        out: dict = {}
        get = out.get
        for e2, c2 in b.items():
            for e1, c1 in a.items():
                e = tuple(map(add, e1, e2))
                out[e] = get(e, 0) + c1 * c2
        out = {e: c for e, c in out.items() if c}
        if len(out) > _max_terms:
            raise ResourceError(f"polynomial product has {len(out)} terms (cap {_max_terms})")
        return MultiPoly(self.alphabet, out, _trusted=True)

    __rmul__ = __mul__

    def __pow__(self, k: int) -> "MultiPoly":
        if k < 0:
            raise ValueError("negative powers are not polynomials")
        result = MultiPoly.one(self.alphabet)
        base = self
        while k:
            if k & 1:
                result = result * base
            k >>= 1
            if k:
                base = base * base
        return result

    # calculus and substitution ----------------------------------------------
    def diff(self, name: str | int, order: int = 1) -> "MultiPoly":
        i = name if isinstance(name, int) else self.alphabet.index(name)
        out = {}
        for e, c in self._terms.items():
            p = e[i]
            if p < order:
                continue
            f = math.perm(p, order)
            e2 = e[:i] + (p - order,) + e[i + 1:]
            out[e2] = c * f
        return MultiPoly(self.alphabet, out, _trusted=True)

    def diff_spatial(self, rho: tuple[int, ...]) -> "MultiPoly":
        """Mixed partial derivative in the spatial variables of multi-index ``rho``."""
        out = {}
        for e, c in self._terms.items():
            f = 1
            for i, r in enumerate(rho):
                if r:
                    if e[i] < r:
                        f = 0
                        break
                    f *= math.perm(e[i], r)
            if f:
                e2 = tuple(p - r for p, r in zip(e, rho)) + e[len(rho):]
                out[e2] = c * f
        return MultiPoly(self.alphabet, out, _trusted=True)

    def substitute(self, name: str, value) -> "MultiPoly":
        """Replace variable ``name`` by ``value`` (a polynomial on the same alphabet or a number)."""
        i = self.alphabet.index(name)
        value = self._coerce(value)
        groups: dict[int, dict] = {}
        for e, c in self._terms.items():
            groups.setdefault(e[i], {})[e[:i] + (0,) + e[i + 1:]] = c
        if set(groups) <= {0}:
            return self
        result = MultiPoly.zero(self.alphabet)
        powers = {0: MultiPoly.one(self.alphabet)}
        for p in sorted(groups):
            if p not in powers:
                powers[p] = value ** p
            result = result + MultiPoly(self.alphabet, groups[p], _trusted=True) * powers[p]
        return result

    def rename(self, mapping: Mapping[str, str]) -> "MultiPoly":
        """Move the exponents of each ``src`` variable onto ``dst`` (no arithmetic).

        Every target must be absent from the polynomial unless it is itself renamed.
        """
        moves = [(self.alphabet.index(s), self.alphabet.index(d)) for s, d in mapping.items()]
        sources = {s for s, _ in moves}
        targets = [d for _, d in moves]
        if len(set(targets)) != len(targets):
            raise StructuralError("rename maps two variables onto one")
        names = self.alphabet.names
        busy = {names[d] for d in targets if d not in sources} & self.variables()
        if busy:
            raise StructuralError(f"rename target(s) {sorted(busy)} already in use")
        moved = {}
        for e, c in self._terms.items():
            e2 = list(e)
            for s in sources:
                e2[s] = 0
            for s, d in moves:
                e2[d] = e[s]
            moved[tuple(e2)] = c
        return MultiPoly(self.alphabet, moved, _trusted=True)

    def embed(self, alphabet: Alphabet) -> "MultiPoly":
        """Re-express over a larger alphabet containing every variable of this one."""
        if alphabet == self.alphabet:
            return self
        slots = [alphabet.index(n) for n in self.alphabet.names]
        n = len(alphabet)
        out = {}
        for e, c in self._terms.items():
            e2 = [0] * n
            for j, p in zip(slots, e):
                e2[j] = p
            out[tuple(e2)] = c
        return MultiPoly(alphabet, out, _trusted=True)

    def restrict(self, alphabet: Alphabet) -> "MultiPoly":
        """Project onto a smaller alphabet; every dropped variable must be absent."""
        keep = {n for n in alphabet.names}
        extra = self.variables() - keep
        if extra:
            raise StructuralError(f"variables {sorted(extra)} still present")
        slots = [self.alphabet.index(n) for n in alphabet.names]
        return MultiPoly(alphabet, {tuple(e[j] for j in slots): c for e, c in self._terms.items()},
                         _trusted=True)

    # evaluation ------------------------------------------------------------
    def evaluate_exact(self, values: Mapping[str, object]) -> Rational:
        """Exact value at rational points; every variable present must be given."""
        names = self.alphabet.names
        vals = {}
        total = _mpq(0)
        for e, c in self._terms.items():
            term = c
            for i, p in enumerate(e):
                if p:
                    if i not in vals:
                        if names[i] not in values:
                            raise StructuralError(f"no value for variable {names[i]!r}")
                        vals[i] = rational(values[names[i]])
                    term *= vals[i] ** p
            total += term
        return total

    def evaluate(self, values: Mapping[str, object]):
        """Floating-point value; entries of ``values`` may be scalars or broadcastable arrays."""
        names = self.alphabet.names
        pw: dict[tuple[int, int], object] = {}
        total = 0.0
        for e, c in self._terms.items():
            term = float(c)
            for i, p in enumerate(e):
                if p:
                    key = (i, p)
                    if key not in pw:
                        if names[i] not in values:
                            raise StructuralError(f"no value for variable {names[i]!r}")
                        pw[key] = np.asarray(values[names[i]], dtype=float) ** p
                    term = term * pw[key]
            total = total + term
        return total

    # comparison / printing ---------------------------------------------------
    def __eq__(self, other) -> bool:
        if isinstance(other, MultiPoly):
            return self.alphabet == other.alphabet and self._terms == other._terms
        try:
            return self == MultiPoly.const(self.alphabet, other)
        except TypeError:
            return NotImplemented

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash((self.alphabet.names, frozenset(self._terms.items())))
        return self._hash

    def __str__(self) -> str:
        if not self._terms:
            return "0"
        names = self.alphabet.names
        out = ""
        for e, c in self.sorted_terms():
            mono = "*".join(
                names[i] if p == 1 else f"{names[i]}^{p}" for i, p in enumerate(e) if p
            )
            sign, c = ("-", -c) if c < 0 else ("+", c)
            cs = _fmt_rational(c)
            body = cs if not mono else mono if c == 1 else f"{cs}*{mono}"
            if not out:
                out = body if sign == "+" else f"-{body}"
            else:
                out += f" {sign} {body}"
        return out

    def __repr__(self) -> str:
        return f"MultiPoly({self})"


# --------------------------------------------------------------------------- operators


def _multinomial(gamma: tuple[int, ...], rho: tuple[int, ...]) -> int:
    out = 1
    for g, r in zip(gamma, rho):
        out *= math.comb(g, r)
    return out


def _sub_indices(gamma: tuple[int, ...]) -> Iterator[tuple[int, ...]]:
    return product(*(range(g + 1) for g in gamma))


class DiffOp:
    """Finite sum of ``coefficient(xi, ...) * d^gamma``; coefficients sit to the left.

    Immutable. Membership in D(a, b) is ``spatial_degree() <= a and order() <= b``.
    """

    __slots__ = ("alphabet", "_terms", "_hash")

    def __init__(self, alphabet: Alphabet, terms: Mapping | None = None, *, _trusted: bool = False):
        self.alphabet = alphabet
        self._hash = None
        if _trusted:
            self._terms = terms
            return
        N = alphabet.N
        clean: dict = {}
        for gamma, coeff in (terms or {}).items():
            gamma = tuple(int(g) for g in gamma)
            if len(gamma) != N or any(g < 0 for g in gamma):
                raise StructuralError(f"bad derivative multi-index {gamma} for N={N}")
            if not isinstance(coeff, MultiPoly):
                coeff = MultiPoly.const(alphabet, coeff)
            _check_same(alphabet, coeff.alphabet)
            clean[gamma] = clean[gamma] + coeff if gamma in clean else coeff
        self._terms = {g: c for g, c in clean.items() if c}

    # constructors -----------------------------------------------------------
    @classmethod
    def zero(cls, alphabet: Alphabet) -> "DiffOp":
        return cls(alphabet, {}, _trusted=True)

    @classmethod
    def identity(cls, alphabet: Alphabet) -> "DiffOp":
        return cls.multiplication(MultiPoly.one(alphabet))

    @classmethod
    def multiplication(cls, p: MultiPoly) -> "DiffOp":
        if p.is_zero():
            return cls.zero(p.alphabet)
        return cls(p.alphabet, {(0,) * p.alphabet.N: p}, _trusted=True)

    @classmethod
    def derivative(cls, alphabet: Alphabet, gamma: tuple[int, ...], coeff=1) -> "DiffOp":
        return cls(alphabet, {tuple(gamma): coeff})

    # access -----------------------------------------------------------------
    @property
    def terms(self) -> Mapping[tuple[int, ...], MultiPoly]:
        return self._terms

    def sorted_terms(self) -> list[tuple[tuple[int, ...], MultiPoly]]:
        return sorted(self._terms.items(), key=lambda kv: (sum(kv[0]), kv[0]))

    def __iter__(self):
        return iter(self.sorted_terms())

    def __bool__(self) -> bool:
        return bool(self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    def n_terms(self) -> int:
        return sum(len(c) for c in self._terms.values())

    def order(self) -> int:
        """Highest derivative order; -1 for the zero operator."""
        return max((sum(g) for g in self._terms), default=-1)

    def spatial_degree(self) -> int:
        """Highest polynomial degree in the spatial offsets; -1 for the zero operator."""
        return max((c.spatial_degree() for c in self._terms.values()), default=-1)

    def in_space(self, a: int, b: int) -> bool:
        """Membership in D(a, b); D(a, b) = {0} when a or b is negative."""
        if self.is_zero():
            return True
        return 0 <= a and 0 <= b and self.spatial_degree() <= a and self.order() <= b

    def variables(self) -> set[str]:
        out: set[str] = set()
        for c in self._terms.values():
            out |= c.variables()
        return out

    # arithmetic -------------------------------------------------------------
    def _check(self, other: "DiffOp") -> None:
        if not isinstance(other, DiffOp):
            raise TypeError(f"expected DiffOp, got {type(other).__name__}")
        _check_same(self.alphabet, other.alphabet)

    def __add__(self, other: "DiffOp") -> "DiffOp":
        self._check(other)
        out = dict(self._terms)
        for g, c in other._terms.items():
            v = out[g] + c if g in out else c
            if v:
                out[g] = v
            else:
                out.pop(g, None)
        return DiffOp(self.alphabet, out, _trusted=True)

    def __neg__(self) -> "DiffOp":
        return DiffOp(self.alphabet, {g: -c for g, c in self._terms.items()}, _trusted=True)

    def __sub__(self, other: "DiffOp") -> "DiffOp":
        return self + (-other)

    def scale(self, c) -> "DiffOp":
        """Left-multiply by a scalar or a polynomial."""
        if isinstance(c, MultiPoly):
            _check_same(self.alphabet, c.alphabet)
        out = {g: p * c for g, p in self._terms.items()}
        return DiffOp(self.alphabet, {g: p for g, p in out.items() if p}, _trusted=True)

    def __matmul__(self, other: "DiffOp") -> "DiffOp":
        return compose(self, other)

    def substitute(self, name: str, value) -> "DiffOp":
        out = {g: c.substitute(name, value) for g, c in self._terms.items()}
        return DiffOp(self.alphabet, {g: c for g, c in out.items() if c}, _trusted=True)

    def map_coefficients(self, fn) -> "DiffOp":
        out = {g: fn(c) for g, c in self._terms.items()}
        alphabet = next(iter(out.values())).alphabet if out else self.alphabet
        return DiffOp(alphabet, {g: c for g, c in out.items() if c}, _trusted=True)

    def embed(self, alphabet: Alphabet) -> "DiffOp":
        if alphabet.spatial != self.alphabet.spatial:
            raise StructuralError("cannot change the spatial variables of an operator")
        if alphabet == self.alphabet:
            return self
        return DiffOp(alphabet, {g: c.embed(alphabet) for g, c in self._terms.items()}, _trusted=True)

    def apply(self, f: MultiPoly) -> MultiPoly:
        """Act on a polynomial function of the spatial offsets."""
        _check_same(self.alphabet, f.alphabet)
        out = MultiPoly.zero(self.alphabet)
        for g, c in self._terms.items():
            out = out + c * f.diff_spatial(g)
        return out

    # comparison / printing ---------------------------------------------------
    def __eq__(self, other) -> bool:
        if not isinstance(other, DiffOp):
            return NotImplemented
        return self.alphabet == other.alphabet and self._terms == other._terms

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash((self.alphabet.names, frozenset(self._terms.items())))
        return self._hash

    def __str__(self) -> str:
        """Deterministic debug form, e.g. ``(2)*d2 + (xi1)*d1``."""
        if not self._terms:
            return "0"
        parts = []
        for g, c in self.sorted_terms():
            if not any(g):
                parts.append(f"({c})")
            elif len(g) == 1:
                parts.append(f"({c})*d{g[0]}")
            else:
                parts.append(f"({c})*d({','.join(map(str, g))})")
        return " + ".join(parts)

    def __repr__(self) -> str:
        return f"DiffOp({self})"


def compose(A: DiffOp, B: DiffOp) -> DiffOp:
    """Operator product ``A o B`` by the Leibniz rule.

    ``(p d^g) o (q d^h) = sum_{r <= g} binom(g, r) p (d^r q) d^(g - r + h)``.
    """
    A._check(B)
    out: dict = {}
    dcache: dict = {}
    for gamma, p in A._terms.items():
        for rho in _sub_indices(gamma):
            mult = _multinomial(gamma, rho)
            rest = tuple(g - r for g, r in zip(gamma, rho))
            for delta, q in B._terms.items():
                key = (delta, rho)
                dq = dcache.get(key)
                if dq is None:
                    dq = q.diff_spatial(rho) if any(rho) else q
                    dcache[key] = dq
                if dq.is_zero():
                    continue
                term = (p * dq).scale(mult)
                g2 = tuple(map(add, rest, delta))
                out[g2] = out[g2] + term if g2 in out else term
    out = {g: c for g, c in out.items() if c}
    result = DiffOp(A.alphabet, out, _trusted=True)
    if result.n_terms() > _max_terms:
        raise ResourceError(f"operator product has {result.n_terms()} terms (cap {_max_terms})")
    return result


def commutator(A: DiffOp, B: DiffOp) -> DiffOp:
    """``[A, B] = A o B - B o A`` (the adjoint action ``ad_A(B)``)."""
    return compose(A, B) - compose(B, A)


def ad_power(Q: DiffOp, A: DiffOp, j: int) -> DiffOp:
    """``ad_Q^j(A)``."""
    for _ in range(j):
        if A.is_zero():
            break
        A = commutator(Q, A)
    return A


def exp_ad(Q: DiffOp, A: DiffOp, theta=None) -> DiffOp:
    """Finite Hadamard sum ``sum_j theta^j / j! * ad_Q^j(A)``.

    ``Q`` must have coefficients free of the spatial offsets; then ``ad_Q`` lowers
    the spatial degree by one and the series stops after ``deg(A) + 1`` terms.
    ``theta`` may be a number, a polynomial (kept symbolic), or None for 1.
    """
    Q._check(A)
    if theta is None:
        theta = MultiPoly.one(A.alphabet)
    elif not isinstance(theta, MultiPoly):
        theta = MultiPoly.const(A.alphabet, theta)
    a = A.spatial_degree()
    total = A
    term = A
    theta_pow = MultiPoly.one(A.alphabet)
    for j in range(1, a + 1):
        term = commutator(Q, term)
        if term.is_zero():
            return total
        theta_pow = theta_pow * theta
        total = total + term.scale(theta_pow.scale(Fraction(1, math.factorial(j))))
    if not term.is_zero() and not commutator(Q, term).is_zero():
        raise NilpotencyError(
            f"ad_Q^{a + 1}(A) != 0: Q has spatial degree {Q.spatial_degree()}, "
            "the adjoint series is not finite"
        )
    return total
