"""Lie brackets of model vector fields and the Hormander functional.

Base fields carry analytic values, Jacobians and time derivatives. Any
Jacobian or time derivative of a composite expression is a central finite
difference of its value (five-point stencil, step ``1e-4 (1 + |x|)``), so
each bracket level adds one finite-difference layer.
"""

from __future__ import annotations

import contextlib
import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .scheme import SchemeTransition
from .sde_model import SdeModel

FD_STEP = 1e-4
MAX_FD_DEPTH = 4
MAX_ORDER = 2


class DerivativeDepthError(ValueError):
    """Derivative data required deeper than finite differences can supply."""


_MEMO = None


@contextlib.contextmanager
def _memo_scope():
    """Share sub-expression values across one pointwise evaluation."""
    global _MEMO
    outer, _MEMO = _MEMO, {}
    try:
        yield
    finally:
        _MEMO = outer


def _stencil(g, h):
    """Five-point central difference ``g'(0)``; exact on polynomials of degree <= 4."""
    return (8.0 * (g(1.0) - g(-1.0)) - (g(2.0) - g(-2.0))) / (12.0 * h)


class FieldExpr:
    """Vector-field expression ``(x, t) -> R^d`` at single points."""

    value_depth = 0

    @property
    def jac_depth(self) -> int:
        return self.value_depth + 1

    @property
    def dt_depth(self) -> int:
        return self.value_depth + 1

    def value(self, x, t) -> np.ndarray:
        if _MEMO is None:
            return self._value(x, t)
        key = (id(self), np.asarray(x, dtype=float).tobytes(), float(t))
        out = _MEMO.get(key)
        if out is None:
            out = _MEMO[key] = self._value(x, t)
        return out

    def _value(self, x, t) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        cols = []
        for k in range(x.size):
            h = FD_STEP * (1.0 + abs(x[k]))
            e = np.zeros(x.size)
            e[k] = h
            cols.append(_stencil(lambda s: self.value(x + s * e, t), h))
        return np.stack(cols, axis=-1)

    def dt(self, x, t) -> np.ndarray:
        h = FD_STEP * (1.0 + abs(t))
        return _stencil(lambda s: self.value(x, t + s * h), h)

    def __call__(self, x, t):
        return self.value(x, t)

    def __add__(self, other):
        return Sum((self, other))

    def __sub__(self, other):
        return Sum((self, Scale(-1.0, other)))

    def __rmul__(self, c):
        return Scale(float(c), self)


class VectorField(FieldExpr):
    """Leaf field with optional analytic Jacobian and time derivative."""

    def __init__(self, fn: Callable, jac: Optional[Callable] = None, dt: Optional[Callable] = None,
                 name: str = "V"):
        self.fn, self.jac, self.dtfn, self.name = fn, jac, dt, name

    @property
    def jac_depth(self):
        return 0 if self.jac is not None else 1

    @property
    def dt_depth(self):
        return 0 if self.dtfn is not None else 1

    def _value(self, x, t):
        return np.asarray(self.fn(np.asarray(x, dtype=float), t), dtype=float)

    def jacobian(self, x, t):
        if self.jac is None:
            return super().jacobian(x, t)
        return np.asarray(self.jac(np.asarray(x, dtype=float), t), dtype=float)

    def dt(self, x, t):
        if self.dtfn is None:
            return super().dt(x, t)
        return np.asarray(self.dtfn(np.asarray(x, dtype=float), t), dtype=float)

    def __repr__(self):
        return self.name


class Bracket(FieldExpr):
    """``[f, g] = (grad g) f - (grad f) g``."""

    def __init__(self, f: FieldExpr, g: FieldExpr):
        self.f, self.g = f, g
        self.value_depth = max(f.jac_depth, g.jac_depth, f.value_depth, g.value_depth)

    def _value(self, x, t):
        if self.f is self.g:
            return np.zeros(np.shape(x))
        return self.g.jacobian(x, t) @ self.f.value(x, t) - self.f.jacobian(x, t) @ self.g.value(x, t)

    def __repr__(self):
        return f"[{self.f!r}, {self.g!r}]"


class Action(FieldExpr):
    """``(grad f) g``."""

    def __init__(self, f: FieldExpr, g: FieldExpr):
        self.f, self.g = f, g
        self.value_depth = max(f.jac_depth, g.value_depth)

    def _value(self, x, t):
        return self.f.jacobian(x, t) @ self.g.value(x, t)

    def __repr__(self):
        return f"D{self.f!r}.{self.g!r}"


class TimeDerivative(FieldExpr):
    def __init__(self, e: FieldExpr):
        self.e = e
        self.value_depth = e.dt_depth

    def _value(self, x, t):
        return self.e.dt(x, t)

    def __repr__(self):
        return f"d_t{self.e!r}"


class Sum(FieldExpr):
    def __init__(self, terms):
        self.terms = tuple(terms)
        self.value_depth = max(e.value_depth for e in self.terms)

    def _value(self, x, t):
        return sum(e.value(x, t) for e in self.terms)

    def __repr__(self):
        return "(" + " + ".join(map(repr, self.terms)) + ")"


class Scale(FieldExpr):
    def __init__(self, c: float, e: FieldExpr):
        self.c, self.e = c, e
        self.value_depth = e.value_depth

    def _value(self, x, t):
        return self.c * self.e.value(x, t)

    def __repr__(self):
        return f"{self.c:g}*{self.e!r}"


def lie_bracket(f: FieldExpr, g: FieldExpr) -> FieldExpr:
    out = Bracket(f, g)
    if out.value_depth > MAX_FD_DEPTH:
        raise DerivativeDepthError(
            f"bracket needs {out.value_depth} nested finite-difference layers (max {MAX_FD_DEPTH})")
    return out


def model_fields(model: SdeModel) -> list:
    """Leaf expressions ``[V0, V1, ..., VN]``."""
    names = ["V0"] + [f"V{i}" for i in range(1, model.noise_dimension + 1)]
    return [VectorField(fn, model.jacobian(j), model.time_derivative(j), names[j])
            for j, fn in enumerate(model.fields)]


def stratonovich_drift(model: SdeModel, transition: SchemeTransition = None) -> FieldExpr:
    """``V0 - 1/2 sum_i (grad V_i) V_i``.

    For the Euler transition the second ``z``-derivatives of ``psi`` vanish,
    so ``V0`` is the drift itself. Other transitions are not supported here.
    """
    if transition is not None and transition.name != "euler":
        raise NotImplementedError("only the Euler transition exposes its z-curvature (zero)")
    v0, *vs = model_fields(model)
    corr = [Action(v, v) for v in vs]
    return Sum((v0, Scale(-0.5, Sum(corr)))) if corr else v0


@dataclass
class BracketBasis:
    order: int
    fields: dict  # multi-index -> [V_1^[alpha], ..., V_N^[alpha]]

    @property
    def expressions(self) -> list:
        return [e for alpha in sorted(self.fields, key=lambda a: (len(a), a)) for e in self.fields[alpha]]

    def __len__(self):
        return sum(len(v) for v in self.fields.values())


def _extend(expr, j, drift, noise):
    if j == 0:
        corr = [lie_bracket(v, lie_bracket(v, expr)) for v in noise]
        return Sum((lie_bracket(drift, expr), TimeDerivative(expr), Scale(0.5, Sum(corr))))
    return lie_bracket(noise[j - 1], expr)


def bracket_basis(model: SdeModel, L: int, transition: SchemeTransition = None) -> BracketBasis:
    """All ``V_i^[alpha]`` with ``|alpha| <= L``, built with the bracket recurrence."""
    if L < 0:
        raise ValueError("order L must be >= 0")
    if L > MAX_ORDER:
        raise DerivativeDepthError(f"bracket order {L} above supported depth {MAX_ORDER}")
    drift = stratonovich_drift(model, transition)
    noise = model_fields(model)[1:]
    fields = {(): list(noise)}
    frontier = [()]
    N = model.noise_dimension
    for _ in range(L):
        nxt = []
        for alpha in frontier:
            for j in range(N + 1):
                fields[alpha + (j,)] = [_extend(e, j, drift, noise) for e in fields[alpha]]
                nxt.append(alpha + (j,))
        frontier = nxt
    return BracketBasis(L, fields)


def gram_matrix(basis: BracketBasis, x, t) -> np.ndarray:
    with _memo_scope():
        vecs = np.array([e.value(x, t) for e in basis.expressions])
    if not np.all(np.isfinite(vecs)):
        raise FloatingPointError(f"non-finite bracket field at x={x}, t={t}")
    return vecs.T @ vecs


def hormander_functional(basis: BracketBasis, x, t) -> float:
    """``1 ^ lambda_min(sum V V^T)`` over the basis fields at ``(x, t)``."""
    lam = float(np.linalg.eigvalsh(gram_matrix(basis, x, t))[0])
    return min(1.0, max(0.0, lam))


@dataclass
class A2Report:
    """Sampled minimum of the Hormander functional.

    A positive minimum over samples is necessary for the uniform condition,
    not a proof of it.
    """

    order: int
    min_value: float
    argmin_x: tuple
    argmin_t: float
    rows: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.min_value > 0.0

    def write_csv(self, fh):
        d = len(self.argmin_x)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{k + 1}" for k in range(d)] + ["t", f"V_{self.order}"])
        for row in self.rows:
            w.writerow([repr(float(v)) for v in row])


def certify_A2(model: SdeModel, L: int, box, count: int, t_range=(0.0, 1.0), seed: int = 0,
               transition: SchemeTransition = None) -> A2Report:
    """Evaluate the functional on ``count`` uniform samples of ``box x t_range``."""
    basis = bracket_basis(model, L, transition)
    box = np.asarray(box, dtype=float).reshape(model.dimension, 2)
    rng = np.random.default_rng(seed)
    xs = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((count, model.dimension))
    ts = t_range[0] + (t_range[1] - t_range[0]) * rng.random(count)
    rows = []
    best = (math.inf, None, None)
    for x, t in zip(xs, ts):
        v = hormander_functional(basis, x, float(t))
        rows.append((*x, t, v))
        if v < best[0]:
            best = (v, tuple(float(c) for c in x), float(t))
    return A2Report(L, best[0], best[1], best[2], rows)
