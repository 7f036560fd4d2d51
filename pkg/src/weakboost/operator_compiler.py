"""Unfold the recursive high-order operator into signed grid programs.

On an interval of length ``T / n**l`` the operator of order ``nu`` is the
plain scheme at level ``l + 1`` plus, for ``i = 1 .. m(l, nu) - 1``, the sum
over ``i`` distinct fine slots of products in which each chosen slot carries
the difference between the order ``q_i(l, nu)`` operator at level ``l + 1``
and a single level-``l + 1`` step. Expanding every difference gives a list
of ``+-1`` products, each a single grid program.

The order arithmetic is done in exact rationals so that ceilings at integer
boundaries are unambiguous.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations, product
from typing import Iterator, Optional

from .scheme import GridProgram

DEFAULT_TERM_CAP = 10 ** 6


class CompileError(ValueError):
    pass


class TermCapExceeded(CompileError):
    """Enumeration would produce more terms than allowed; use sampling instead."""


def as_fraction(value) -> Fraction:
    """Exact rational for an int, Fraction, string like ``"3/2"`` or a float."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, str):
        return Fraction(value.strip())
    return Fraction(value).limit_denominator(10 ** 6)


def _ceil(x: Fraction) -> int:
    return -((-x.numerator) // x.denominator)


def m_order(l: int, nu, alpha=1) -> int:
    """Number of correction layers ``ceil(nu / ((1 + alpha) l + alpha))``."""
    nu, alpha = as_fraction(nu), as_fraction(alpha)
    if nu <= 0 or alpha <= 0:
        raise CompileError("nu and alpha must be positive")
    return _ceil(nu / ((1 + alpha) * l + alpha))


def _q(i: int, l: int, nu, alpha) -> Fraction:
    nu, alpha = as_fraction(nu), as_fraction(alpha)
    return nu + _ceil(i - (1 + alpha) * (l + 1) * (i - 1))


def q_order(i: int, l: int, nu, alpha=1) -> Fraction:
    """Order of the level ``l + 1`` sub-operator used by the ``i``-slot correction."""
    m = m_order(l, nu, alpha)
    if not 1 <= i <= m - 1:
        raise CompileError(f"i = {i} outside 1..{m - 1} for (l, nu) = ({l}, {nu})")
    return _q(i, l, nu, alpha)


def kappa_smoothness(l: int, nu, alpha=1, beta: int = 4) -> int:
    """Derivative count needed by the smooth-function error bound."""
    if beta < 1:
        raise CompileError("beta must be >= 1")
    m = m_order(l, nu, alpha)
    inner = [i * kappa_smoothness(l + 1, q_order(i, l, nu, alpha), alpha, beta)
             for i in range(1, m)]
    return max([beta * m] + inner)


def q_nu(nu, alpha=1, beta: int = 4) -> int:
    """Regularisation order ``max_{i <= m(0, nu)} i * max(beta, kappa(1, q_i(0, nu)))``.

    The index runs up to ``m(0, nu)`` inclusive, one past the range of the
    corrections themselves; the raw ``q_i`` formula is used for that index.
    """
    m = m_order(0, nu, alpha)
    return max(i * max(beta, kappa_smoothness(1, _q(i, 0, nu, alpha), alpha, beta))
               for i in range(1, m + 1))


def default_beta(alpha) -> int:
    return _ceil(2 * as_fraction(alpha) + 2)


@dataclass(frozen=True)
class OrderParams:
    nu: Fraction
    alpha: Fraction
    n: int
    T: float = 1.0
    beta: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "nu", as_fraction(self.nu))
        object.__setattr__(self, "alpha", as_fraction(self.alpha))
        if self.nu <= 0 or self.alpha <= 0:
            raise CompileError("nu and alpha must be positive")
        if int(self.n) != self.n or self.n < 2:
            raise CompileError(f"grid base n = {self.n} must be an integer >= 2")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise CompileError("horizon T must be positive and finite")
        if self.beta is None:
            object.__setattr__(self, "beta", default_beta(self.alpha))

    @property
    def l_max(self) -> int:
        return _ceil(self.nu / self.alpha)

    @property
    def m0(self) -> int:
        return m_order(0, self.nu, self.alpha)


@dataclass(frozen=True)
class SignedTerm:
    coeff: int
    program: GridProgram


@dataclass(frozen=True)
class CompiledOperator:
    params: OrderParams
    terms: tuple
    pre_merge_terms: int = 0
    metadata: dict = field(default_factory=dict, compare=False)

    @property
    def mass(self) -> int:
        return sum(t.coeff for t in self.terms)

    @property
    def deepest_level(self) -> int:
        return max(t.program.max_level for t in self.terms)

    @property
    def abs_mass(self) -> int:
        return sum(abs(t.coeff) for t in self.terms)

    def __len__(self):
        return len(self.terms)


def _merge(pieces) -> tuple:
    out = []
    for level, count in pieces:
        if count == 0:
            continue
        if out and out[-1][0] == level:
            out[-1] = (level, out[-1][1] + count)
        else:
            out.append((level, count))
    return tuple(out)


def expansion_size(nu, l: int, alpha, n: int) -> int:
    """Number of ``+-1`` products the unfolding produces, without building them."""
    m = m_order(l, nu, alpha)
    total = 1
    for i in range(1, m):
        per_slot = expansion_size(q_order(i, l, nu, alpha), l + 1, alpha, n) + 1
        total += math.comb(n, i) * per_slot ** i
    return total


def _expand_interval(nu: Fraction, l: int, alpha: Fraction, n: int, cache: dict) -> list:
    """Signed piece lists covering one interval of length ``T / n**l``."""
    key = (nu, l)
    if key in cache:
        return cache[key]
    m = m_order(l, nu, alpha)
    terms = [(1, ((l + 1, n),))]
    for i in range(1, m):
        q = q_order(i, l, nu, alpha)
        # (hat Q^{q} - Q) on one fine slot
        diff = _expand_interval(q, l + 1, alpha, n, cache) + [(-1, ((l + 1, 1),))]
        for slots in combinations(range(n), i):
            for choice in product(diff, repeat=i):
                sign = 1
                pieces = []
                prev = 0
                for slot, (s, sub) in zip(slots, choice):
                    sign *= s
                    pieces.append((l + 1, slot - prev))
                    pieces.extend(sub)
                    prev = slot + 1
                pieces.append((l + 1, n - prev))
                terms.append((sign, _merge(pieces)))
    cache[key] = terms
    return terms


def expand_terms(params: OrderParams, cap: int = DEFAULT_TERM_CAP) -> Iterator[SignedTerm]:
    """All unmerged ``+-1`` products, in expansion order."""
    size = expansion_size(params.nu, 0, params.alpha, params.n)
    if size > cap:
        raise TermCapExceeded(
            f"unfolding yields {size} terms (cap {cap}); use a sampling estimator")
    for sign, pieces in _expand_interval(params.nu, 0, params.alpha, params.n, {}):
        yield SignedTerm(sign, GridProgram(pieces, params.n, params.T))


def _canonical_key(program: GridProgram):
    return (program.max_level, program.step_count, program.pieces)


def compile_operator(params: OrderParams, cap: int = DEFAULT_TERM_CAP) -> CompiledOperator:
    """Merged signed combination of grid programs; zero coefficients dropped."""
    counts = Counter()
    pre = 0
    for term in expand_terms(params, cap):
        counts[term.program.pieces] += term.coeff
        pre += 1
    programs = [GridProgram(p, params.n, params.T) for p, c in counts.items() if c != 0]
    programs.sort(key=_canonical_key)
    terms = tuple(SignedTerm(counts[p.pieces], p) for p in programs)
    meta = {
        "m0": params.m0,
        "l_max": params.l_max,
        "beta": params.beta,
        "kappa": kappa_smoothness(0, params.nu, params.alpha, params.beta),
        "q_nu": q_nu(params.nu, params.alpha, params.beta),
    }
    return CompiledOperator(params, terms, pre, meta)


def _fmt_rational(x: Fraction) -> str:
    return str(x.numerator) if x.denominator == 1 else f"{x.numerator}/{x.denominator}"


def to_text(op: CompiledOperator) -> str:
    p = op.params
    lines = [f"{_fmt_rational(p.nu)} {_fmt_rational(p.alpha)} {p.n} {p.T!r} {len(op.terms)}"]
    for term in op.terms:
        lines.append(f"{term.coeff} {term.program.text()}")
    return "\n".join(lines) + "\n"


def from_text(text: str) -> CompiledOperator:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise CompileError("empty operator text")
    head = lines[0].split()
    if len(head) != 5:
        raise CompileError(f"bad header {lines[0]!r}")
    params = OrderParams(Fraction(head[0]), Fraction(head[1]), int(head[2]), float(head[3]))
    count = int(head[4])
    if len(lines) - 1 != count:
        raise CompileError(f"header announces {count} terms, found {len(lines) - 1}")
    terms = []
    for ln in lines[1:]:
        fields = ln.split()
        pieces = tuple(tuple(int(v) for v in tok.split(":")) for tok in fields[1:])
        terms.append(SignedTerm(int(fields[0]), GridProgram(pieces, params.n, params.T)))
    return CompiledOperator(params, tuple(terms))


def horizon_floor(nu, alpha, n: int, T: float) -> float:
    """Smallest level-1 grid time at or above ``T (n - m) / (n (m + 1))``, ``m = m(0, nu)``."""
    m = m_order(0, nu, alpha)
    target = Fraction(n - m, n * (m + 1))
    k = max(0, _ceil(target * n))
    return k * T / n
