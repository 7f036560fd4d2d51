"""Noise-free evaluation of compiled operators for affine models.

An Euler step of ``dX = (A X + c) dt + B dW`` maps ``N(mu, S)`` to
``N((I + A h) mu + c h, (I + A h) S (I + A h)^T + h B B^T)`` exactly, so every
grid program has a Gaussian terminal law. Geometric Brownian motion is handled
through its moment recursion (polynomial test functions only).
"""

from __future__ import annotations

import math
from itertools import combinations

import numpy as np

from .operator_compiler import CompiledOperator, OrderParams, m_order, q_order
from .scheme import GridProgram
from .sde_model import (ReferenceLaw, SdeModel, TestFunction, gaussian_expectation,
                        standard_normal_moment)


class OracleError(ValueError):
    """Model or test function outside what the oracle evaluates in closed form."""


class AffineModelView:
    """Per-step affine-Gaussian maps ``(M, v, S)``: ``mu -> M mu + v``, ``Sigma -> M Sigma M^T + S``."""

    def __init__(self, model: SdeModel):
        if model.affine is None:
            raise OracleError(f"model {model.name!r} is not affine")
        self.model = model
        self.coeffs = model.affine
        self.d = model.dimension
        self._cache = {}

    def step_map(self, t: float, h: float):
        A = np.atleast_2d(self.coeffs.matrix(t))
        c = np.atleast_1d(self.coeffs.offset(t))
        B = np.atleast_2d(self.coeffs.loading(t))
        M = np.eye(self.d) + A * h
        return M, c * h, h * (B @ B.T)

    @staticmethod
    def compose(first, second):
        M1, v1, S1 = first
        M2, v2, S2 = second
        return M2 @ M1, M2 @ v1 + v2, M2 @ S1 @ M2.T + S2

    def identity(self):
        return np.eye(self.d), np.zeros(self.d), np.zeros((self.d, self.d))

    def segment_map(self, level: int, count: int, h: float, t0: float):
        if not self.coeffs.homogeneous:
            out = self.identity()
            for k in range(count):
                out = self.compose(out, self.step_map(t0 + k * h, h))
            return out
        key = (level, count, h)
        if key not in self._cache:
            out = self.identity()
            for _ in range(count):
                out = self.compose(out, self.step_map(0.0, h))
            self._cache[key] = out
        return self._cache[key]

    @staticmethod
    def push(law, step):
        mu, S = law
        M, v, Q = step
        return M @ mu + v, M @ S @ M.T + Q


def propagate_law(model: SdeModel, program: GridProgram, x0, view: AffineModelView = None):
    """Exact terminal ``(mean, covariance)`` of the Euler scheme on ``program``."""
    view = view or AffineModelView(model)
    mu = np.atleast_1d(np.asarray(x0, dtype=float))
    law = (mu, np.zeros((mu.size, mu.size)))
    for seg in program.segments:
        law = view.push(law, view.segment_map(seg.level, seg.steps, seg.step, seg.start))
    return law


def _factor_moments(a: float, s: float, h: float, kmax: int) -> np.ndarray:
    """E[(1 + a h + s sqrt(h) Z)^k], k = 0..kmax."""
    u, w = 1.0 + a * h, s * math.sqrt(h)
    return np.array([
        math.fsum(math.comb(k, j) * u ** (k - j) * w ** j * standard_normal_moment(j)
                  for j in range(k + 1))
        for k in range(kmax + 1)])


def propagate_moments(model: SdeModel, program: GridProgram, x0, kmax: int) -> np.ndarray:
    """Raw moments ``E[X_T^k]``, ``k = 0..kmax``, for the multiplicative 1-d model."""
    if model.multiplicative is None:
        raise OracleError(f"model {model.name!r} has no multiplicative structure")
    a, s = model.multiplicative
    x0 = float(np.atleast_1d(x0)[0])
    mom = np.array([x0 ** k for k in range(kmax + 1)])
    for seg in program.segments:
        mom = mom * _factor_moments(a, s, seg.step, kmax) ** seg.steps
    return mom


def _smoothed_moments(mom: np.ndarray, eps: float) -> np.ndarray:
    out = np.empty_like(mom)
    for k in range(mom.size):
        out[k] = math.fsum(math.comb(k, j) * mom[k - j] * eps ** j * standard_normal_moment(j)
                           for j in range(k + 1))
    return out


def _smoothing_eps(smoothing):
    if smoothing is None:
        return 0.0
    theta, delta = smoothing
    return delta ** theta


def program_expectation(model: SdeModel, program: GridProgram, f: TestFunction, x0,
                        smoothing=None, view: AffineModelView = None) -> float:
    """``E[f(X_T^program + delta^theta G)]`` in closed form."""
    eps = _smoothing_eps(smoothing)
    if model.affine is not None:
        if f.kind not in ("indicator", "polynomial"):
            raise OracleError(f"unsupported test function kind {f.kind!r}")
        mu, S = propagate_law(model, program, x0, view)
        if eps:
            S = S + eps * eps * np.eye(S.shape[0])
        return gaussian_expectation(f, mu, S)
    if model.multiplicative is not None:
        if f.kind != "polynomial":
            raise OracleError("multiplicative models support polynomial test functions only")
        mom = propagate_moments(model, program, x0, f.degree)
        if eps:
            mom = _smoothed_moments(mom, eps)
        return math.fsum(c * mom[e[0]] for e, c in f.terms)
    raise OracleError(f"model {model.name!r} is neither affine nor multiplicative")


def term_values(op: CompiledOperator, model: SdeModel, f: TestFunction, x0, smoothing=None) -> list:
    view = AffineModelView(model) if model.affine is not None else None
    return [program_expectation(model, t.program, f, x0, smoothing, view) for t in op.terms]


def evaluate_exact(op: CompiledOperator, model: SdeModel, f: TestFunction, x0,
                   smoothing=None) -> float:
    """Signed sum of exact per-program expectations, reduced in term order."""
    values = term_values(op, model, f, x0, smoothing)
    return math.fsum(t.coeff * v for t, v in zip(op.terms, values))


def evaluate_recursive(params: OrderParams, model: SdeModel, f: TestFunction, x0,
                       smoothing=None) -> float:
    """Evaluate the recursive definition directly by pushing signed Gaussian laws forward.

    Independent of the compiler: no grid programs, no merging. The number of
    laws grows like the unmerged term count, so keep ``n`` and ``nu`` small.
    """
    view = AffineModelView(model)
    n, T, alpha = params.n, params.T, params.alpha
    d = model.dimension

    def plain(laws, level, count, t0):
        if count == 0:
            return laws
        h = T / n ** level
        step = view.segment_map(level, count, h, t0)
        return [(w, *view.push((mu, S), step)) for w, mu, S in laws]

    def hat(laws, nu, l, t0):
        h = T / n ** (l + 1)
        out = plain(laws, l + 1, n, t0)
        for i in range(1, m_order(l, nu, alpha)):
            q = q_order(i, l, nu, alpha)
            for slots in combinations(range(n), i):
                cur, prev = laws, 0
                for slot in slots:
                    cur = plain(cur, l + 1, slot - prev, t0 + prev * h)
                    ts = t0 + slot * h
                    cur = hat(cur, q, l + 1, ts) + [
                        (-w, mu, S) for w, mu, S in plain(cur, l + 1, 1, ts)]
                    prev = slot + 1
                out = out + plain(cur, l + 1, n - prev, t0 + prev * h)
        return out

    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    laws = hat([(1, x0, np.zeros((d, d)))], params.nu, 0, 0.0)
    eps = _smoothing_eps(smoothing)
    return math.fsum(w * gaussian_expectation(f, mu, S + eps * eps * np.eye(d)) for w, mu, S in laws)


def operator_error(op: CompiledOperator, model: SdeModel, law: ReferenceLaw, f: TestFunction, x0,
                   smoothing=None) -> float:
    """Signed bias ``hat Q f(x0) - P_T f(x0)``."""
    return evaluate_exact(op, model, f, x0, smoothing) - law.expectation(f, x0, op.params.T)
