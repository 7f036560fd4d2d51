"""SDE coefficients, test functions and closed-form reference laws.

All vector fields are vectorised over leading axes: a field evaluated at ``x``
of shape ``(..., d)`` returns shape ``(..., d)``, a Jacobian returns
``(..., d, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.special import ndtr

Field = Callable[[np.ndarray, float], np.ndarray]


class ModelError(ValueError):
    """Raised for unknown model names or invalid parameters."""


@dataclass(frozen=True)
class AffineCoefficients:
    """Affine drift ``A(t) x + c(t)`` and state-independent diffusion ``B(t)``.

    ``homogeneous`` lets the Gaussian oracle cache composed step maps.
    """

    matrix: Callable[[float], np.ndarray]
    offset: Callable[[float], np.ndarray]
    loading: Callable[[float], np.ndarray]
    homogeneous: bool = True


@dataclass(frozen=True)
class SdeModel:
    """Drift ``V0`` and diffusion columns ``V1..VN`` of an Ito SDE."""

    name: str
    dimension: int
    noise_dimension: int
    drift: Field
    diffusion: tuple
    drift_jacobian: Optional[Field] = None
    diffusion_jacobians: Optional[tuple] = None
    drift_dt: Optional[Field] = None
    diffusion_dt: Optional[tuple] = None
    smooth: bool = True
    affine: Optional[AffineCoefficients] = None
    # (a, sigma) for dX = aX dt + sigma X dW, which the oracle handles by moments
    multiplicative: Optional[tuple] = None
    params: tuple = ()

    def __post_init__(self):
        if self.dimension < 1 or self.noise_dimension < 1:
            raise ModelError("dimensions must be positive")
        if len(self.diffusion) != self.noise_dimension:
            raise ModelError(
                f"expected {self.noise_dimension} diffusion columns, got {len(self.diffusion)}")

    @property
    def fields(self) -> tuple:
        return (self.drift,) + tuple(self.diffusion)

    def diffusion_matrix(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.stack([v(x, t) for v in self.diffusion], axis=-1)

    def jacobian(self, j: int) -> Optional[Field]:
        """Analytic spatial Jacobian of field ``j`` (0 = drift), if supplied."""
        if j == 0:
            return self.drift_jacobian
        if self.diffusion_jacobians is None:
            return None
        return self.diffusion_jacobians[j - 1]

    def time_derivative(self, j: int) -> Optional[Field]:
        if j == 0:
            return self.drift_dt
        if self.diffusion_dt is None:
            return None
        return self.diffusion_dt[j - 1]


def central_jacobian(fn: Field, x, t, rel_step=1e-5) -> np.ndarray:
    """Central finite-difference Jacobian of ``fn`` at a single point."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    cols = []
    for k in range(d):
        h = rel_step * (1.0 + abs(x[k]))
        e = np.zeros(d)
        e[k] = h
        cols.append((np.asarray(fn(x + e, t)) - np.asarray(fn(x - e, t))) / (2 * h))
    return np.stack(cols, axis=-1)


def check_jacobians(model: SdeModel, points, times, rtol=1e-5, rel_step=1e-5) -> float:
    """Largest relative mismatch between supplied Jacobians and finite differences.

    Raises ``ModelError`` when the mismatch exceeds ``rtol``.
    """
    worst = 0.0
    for j, fn in enumerate(model.fields):
        jac = model.jacobian(j)
        if jac is None:
            continue
        for x, t in zip(points, times):
            exact = np.asarray(jac(np.asarray(x, float), t))
            approx = central_jacobian(fn, x, t, rel_step)
            scale = max(1.0, float(np.max(np.abs(exact))))
            worst = max(worst, float(np.max(np.abs(exact - approx))) / scale)
    if worst > rtol:
        raise ModelError(f"Jacobian mismatch {worst:.3e} exceeds {rtol:.1e}")
    return worst


# -- test functions ---------------------------------------------------------

@dataclass(frozen=True)
class TestFunction:
    """Test function ``f: R^d -> R`` evaluated row-wise on arrays ``(..., d)``.

    ``indicator`` is ``1{<direction, x> <= threshold}``; ``polynomial`` maps
    exponent tuples to coefficients; ``smooth`` wraps an arbitrary callable.
    """

    __test__ = False  # not a pytest class

    kind: str
    direction: tuple = ()
    threshold: float = 0.0
    terms: tuple = ()
    func: Optional[Callable] = None
    sup_norm: float = math.inf
    label: str = ""

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "indicator":
            a = np.asarray(self.direction, dtype=float)
            return (x @ a <= self.threshold).astype(float)
        if self.kind == "polynomial":
            out = np.zeros(x.shape[:-1])
            for exps, coeff in self.terms:
                out = out + coeff * np.prod(x ** np.asarray(exps, dtype=float), axis=-1)
            return out
        return np.asarray(self.func(x), dtype=float)

    @property
    def bound(self) -> float:
        if self.kind == "indicator":
            return 1.0
        if self.kind == "polynomial":
            if all(not any(e) for e, _ in self.terms):
                return abs(sum(c for _, c in self.terms))
            return math.inf
        return self.sup_norm

    @property
    def degree(self) -> int:
        if self.kind != "polynomial":
            raise ValueError("degree is defined for polynomials only")
        return max((sum(e) for e, _ in self.terms), default=0)

    @property
    def id(self) -> str:
        if self.label:
            return self.label
        if self.kind == "indicator":
            a = " ".join(f"{v:g}" for v in self.direction)
            return f"ind(a={a};K={self.threshold:.6g})"
        if self.kind == "polynomial":
            return "poly(" + " + ".join(
                f"{c:g}*x^" + ".".join(str(e) for e in exps) for exps, c in self.terms) + ")"
        return "smooth"


def indicator(threshold: float, direction: Sequence[float] = (1.0,)) -> TestFunction:
    return TestFunction("indicator", direction=tuple(float(a) for a in direction),
                        threshold=float(threshold))


def polynomial(terms, dimension: int = 1) -> TestFunction:
    """Polynomial from ``{exponents: coeff}`` or, in 1-d, a coefficient list."""
    if isinstance(terms, dict):
        items = tuple(sorted((tuple(int(e) for e in k), float(v)) for k, v in terms.items()))
    else:
        items = tuple(((k,) + (0,) * (dimension - 1), float(c))
                      for k, c in enumerate(terms) if c != 0)
    return TestFunction("polynomial", terms=items)


def constant(value: float = 1.0, dimension: int = 1) -> TestFunction:
    return TestFunction("polynomial", terms=(((0,) * dimension, float(value)),),
                        label="one" if value == 1.0 else f"const({value:g})")


def smooth(func: Callable, bound: float = math.inf, label: str = "smooth") -> TestFunction:
    return TestFunction("smooth", func=func, sup_norm=bound, label=label)


# -- Gaussian expectations ----------------------------------------------------

def gaussian_monomial_moment(indices: tuple, mean, cov) -> float:
    """E[prod_k X_{indices[k]}] for X ~ N(mean, cov).

    Uses Stein's identity E[X_a g(X)] = mu_a E[g] + sum_b S_ab E[d_b g].
    """
    if not indices:
        return 1.0
    a, rest = indices[0], indices[1:]
    total = mean[a] * gaussian_monomial_moment(rest, mean, cov)
    for k, b in enumerate(rest):
        total += cov[a, b] * gaussian_monomial_moment(rest[:k] + rest[k + 1:], mean, cov)
    return total


def gaussian_expectation(f: TestFunction, mean, cov) -> float:
    """Closed-form E[f(X)] for X ~ N(mean, cov) and indicator/polynomial ``f``."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if f.kind == "indicator":
        a = np.asarray(f.direction, dtype=float)
        m = float(a @ mean)
        v = float(a @ cov @ a)
        if v <= 0.0:
            return 1.0 if m <= f.threshold else 0.0
        return float(ndtr((f.threshold - m) / math.sqrt(v)))
    if f.kind == "polynomial":
        total = []
        for exps, coeff in f.terms:
            idx = tuple(i for i, e in enumerate(exps) for _ in range(e))
            total.append(coeff * gaussian_monomial_moment(idx, mean, cov))
        return math.fsum(total)
    raise ValueError(f"no closed form for test function kind {f.kind!r}")


def standard_normal_moment(k: int) -> float:
    return 0.0 if k % 2 else float(math.prod(range(k - 1, 0, -2)))


# -- reference laws -------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceLaw:
    """Exact law of ``X_T`` given ``X_0 = x0``.

    ``gaussian``: ``moments(x0, T) -> (mean, cov)``.
    ``lognormal``: 1-d ``dX = aX dt + sigma X dW`` with ``params = (a, sigma)``.
    """

    kind: str
    moments: Optional[Callable] = None
    params: tuple = ()

    def mean_cov(self, x0, T):
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        if self.kind == "gaussian":
            m, c = self.moments(x0, T)
            return np.atleast_1d(m), np.atleast_2d(c)
        if self.kind == "lognormal":
            a, s = self.params
            m = x0[0] * math.exp(a * T)
            var = x0[0] ** 2 * math.exp(2 * a * T) * math.expm1(s * s * T)
            return np.array([m]), np.array([[var]])
        raise ModelError("no reference law available")

    def expectation(self, f: TestFunction, x0, T) -> float:
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        if self.kind == "gaussian":
            return gaussian_expectation(f, *self.mean_cov(x0, T))
        if self.kind == "lognormal":
            a, s = self.params
            if f.kind == "polynomial":
                return math.fsum(
                    c * x0[0] ** e[0] * math.exp(e[0] * a * T + 0.5 * e[0] * (e[0] - 1) * s * s * T)
                    for e, c in f.terms)
            if f.kind == "indicator":
                return self._lognormal_indicator(f, x0[0], T)
        raise ModelError(f"no exact expectation for {self.kind} law and {f.kind} function")

    def _lognormal_indicator(self, f, x0, T):
        a, s = self.params
        w = f.direction[0]
        if w == 0:
            return 1.0 if 0.0 <= f.threshold else 0.0
        if x0 <= 0:
            raise ModelError("lognormal reference needs x0 > 0")
        k = f.threshold / w
        loc = math.log(x0) + (a - 0.5 * s * s) * T
        scale = s * math.sqrt(T)
        if k <= 0:
            below = 0.0
        elif scale == 0:
            below = 1.0 if loc <= math.log(k) else 0.0
        else:
            below = float(ndtr((math.log(k) - loc) / scale))
        return below if w > 0 else 1.0 - below

    def sample(self, x0, T, size, rng) -> np.ndarray:
        """Draws from the exact law, shape ``(size, d)``."""
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        if self.kind == "gaussian":
            m, c = self.mean_cov(x0, T)
            return rng.multivariate_normal(m, c, size=size, method="eigh")
        if self.kind == "lognormal":
            a, s = self.params
            w = rng.standard_normal(size) * math.sqrt(T)
            return (x0[0] * np.exp((a - 0.5 * s * s) * T + s * w))[:, None]
        raise ModelError("no reference law available")


def affine_gaussian_law(matrix, offset, loading) -> Callable:
    """Exact law of ``dX = (A X + c) dt + B dW`` via Van Loan block exponentials."""
    A = np.atleast_2d(np.asarray(matrix, float))
    c = np.atleast_1d(np.asarray(offset, float))
    B = np.atleast_2d(np.asarray(loading, float))
    d = A.shape[0]

    def moments(x0, T):
        # mean: exponential of the augmented generator [[A, c], [0, 0]]
        aug = np.zeros((d + 1, d + 1))
        aug[:d, :d] = A
        aug[:d, d] = c
        mean = (expm(aug * T) @ np.append(x0, 1.0))[:d]
        van = np.zeros((2 * d, 2 * d))
        van[:d, :d] = -A
        van[:d, d:] = B @ B.T
        van[d:, d:] = A.T
        e = expm(van * T)
        phi_t = e[d:, d:]
        cov = phi_t.T @ e[:d, d:]
        return mean, 0.5 * (cov + cov.T)

    return moments


# -- builtin models ----------------------------------------------------------------

def _const(vec):
    vec = np.asarray(vec, dtype=float)
    return lambda x, t: np.broadcast_to(vec, np.shape(x)).copy()


def _zero_jac(d):
    return lambda x, t: np.zeros(np.shape(x)[:-1] + (d, d))


def _check_finite(name, params, count):
    if len(params) != count:
        raise ModelError(f"{name} expects {count} parameters, got {len(params)}")
    if not all(math.isfinite(p) for p in params):
        raise ModelError(f"{name}: non-finite parameters {params}")


def brownian(dimension: int = 1):
    d = dimension
    cols = tuple(_const(np.eye(d)[i]) for i in range(d))
    zeros = _zero_jac(d)
    model = SdeModel(
        "brownian", d, d, _const(np.zeros(d)), cols,
        drift_jacobian=zeros, diffusion_jacobians=(zeros,) * d,
        drift_dt=_const(np.zeros(d)), diffusion_dt=(_const(np.zeros(d)),) * d,
        affine=AffineCoefficients(lambda t: np.zeros((d, d)), lambda t: np.zeros(d),
                                  lambda t: np.eye(d)))
    law = ReferenceLaw("gaussian", lambda x0, T: (np.array(x0, float), T * np.eye(d)))
    return model, law


def linear_ou(a: float, sigma: float):
    """``dX = aX dt + sigma dW`` in one dimension."""
    model = SdeModel(
        "linear-ou", 1, 1, lambda x, t: a * x, (_const([sigma]),),
        drift_jacobian=lambda x, t: np.full(np.shape(x)[:-1] + (1, 1), a),
        diffusion_jacobians=(_zero_jac(1),),
        drift_dt=_const([0.0]), diffusion_dt=(_const([0.0]),),
        affine=AffineCoefficients(lambda t: np.array([[a]]), lambda t: np.zeros(1),
                                  lambda t: np.array([[sigma]])),
        params=(a, sigma))

    def moments(x0, T):
        mean = x0 * math.exp(a * T)
        # (e^{2aT} - 1) / (2a), continuous at a = 0
        var = sigma ** 2 * (T if a == 0 else math.expm1(2 * a * T) / (2 * a))
        return mean, np.array([[var]])

    return model, ReferenceLaw("gaussian", moments)


def geometric(a: float, sigma: float):
    """``dX = aX dt + sigma X dW`` in one dimension."""
    model = SdeModel(
        "geometric", 1, 1, lambda x, t: a * x, (lambda x, t: sigma * np.asarray(x, float),),
        drift_jacobian=lambda x, t: np.full(np.shape(x)[:-1] + (1, 1), a),
        diffusion_jacobians=(lambda x, t: np.full(np.shape(x)[:-1] + (1, 1), sigma),),
        drift_dt=_const([0.0]), diffusion_dt=(_const([0.0]),),
        multiplicative=(a, sigma), params=(a, sigma))
    return model, ReferenceLaw("lognormal", params=(a, sigma))


def kinetic_example(b, sigma, db, dsigma, dtb=None, dtsigma=None, name="kinetic-example"):
    """Two-dimensional system ``dX1 = b dt + sigma dW``, ``dX2 = X1 dt``.

    ``b(x1, t)``, ``sigma(x1, t)`` and their ``x1``-derivatives act on arrays.
    """
    zero = lambda x1, t: np.zeros_like(x1)
    dtb = dtb or zero
    dtsigma = dtsigma or zero

    def drift(x, t):
        x = np.asarray(x, float)
        return np.stack([b(x[..., 0], t), x[..., 0]], axis=-1)

    def diff(x, t):
        x = np.asarray(x, float)
        return np.stack([sigma(x[..., 0], t), np.zeros(x.shape[:-1])], axis=-1)

    def drift_jac(x, t):
        x = np.asarray(x, float)
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = db(x[..., 0], t)
        out[..., 1, 0] = 1.0
        return out

    def diff_jac(x, t):
        x = np.asarray(x, float)
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = dsigma(x[..., 0], t)
        return out

    def drift_t(x, t):
        x = np.asarray(x, float)
        return np.stack([dtb(x[..., 0], t), np.zeros(x.shape[:-1])], axis=-1)

    def diff_t(x, t):
        x = np.asarray(x, float)
        return np.stack([dtsigma(x[..., 0], t), np.zeros(x.shape[:-1])], axis=-1)

    return SdeModel(name, 2, 1, drift, (diff,), drift_jacobian=drift_jac,
                    diffusion_jacobians=(diff_jac,), drift_dt=drift_t, diffusion_dt=(diff_t,))


def _kinetic_from_params(p):
    """``b = p0 + p1 x1``, ``sigma = p2 + p3 sin(x1)``."""
    b0, b1, s0, s1 = p
    model = kinetic_example(
        lambda x, t: b0 + b1 * x, lambda x, t: s0 + s1 * np.sin(x),
        lambda x, t: np.full_like(x, b1), lambda x, t: s1 * np.cos(x))
    if s1 != 0:
        return model, ReferenceLaw("none")
    A = np.array([[b1, 0.0], [1.0, 0.0]])
    c = np.array([b0, 0.0])
    B = np.array([[s0], [0.0]])
    model = replace(model, affine=AffineCoefficients(lambda t: A, lambda t: c, lambda t: B),
                    params=tuple(p))
    return model, ReferenceLaw("gaussian", affine_gaussian_law(A, c, B))


def degenerate(dimension: int = 2):
    """Rank-deficient model ``dX = e1 dW``; fails uniform ellipticity for d >= 2."""
    d = dimension
    zeros = _zero_jac(d)
    model = SdeModel(
        "degenerate", d, 1, _const(np.zeros(d)), (_const(np.eye(d)[0]),),
        drift_jacobian=zeros, diffusion_jacobians=(zeros,),
        drift_dt=_const(np.zeros(d)), diffusion_dt=(_const(np.zeros(d)),),
        affine=AffineCoefficients(lambda t: np.zeros((d, d)), lambda t: np.zeros(d),
                                  lambda t: np.eye(d)[:, :1]))
    e1 = np.diag(np.eye(d)[0])
    return model, ReferenceLaw("gaussian", lambda x0, T: (np.array(x0, float), T * e1))


BUILTIN_MODELS = ("brownian", "linear-ou", "geometric", "kinetic-example", "degenerate")


def builtin_model(name: str, params: Sequence[float] = ()) -> tuple:
    """Look up a named model; returns ``(SdeModel, ReferenceLaw)``.

    ``brownian [d]``, ``linear-ou a sigma``, ``geometric a sigma``,
    ``kinetic-example b0 b1 s0 s1`` (``b = b0 + b1 x1``, ``sigma = s0 + s1 sin x1``)
    and ``degenerate [d]``.
    """
    params = tuple(float(p) for p in params)
    if name == "brownian":
        _check_finite(name, params, len(params))
        d = int(params[0]) if params else 1
        return brownian(d)
    if name == "linear-ou":
        _check_finite(name, params, 2)
        return linear_ou(*params)
    if name == "geometric":
        _check_finite(name, params, 2)
        return geometric(*params)
    if name == "kinetic-example":
        _check_finite(name, params, 4)
        return _kinetic_from_params(params)
    if name == "degenerate":
        _check_finite(name, params, len(params))
        d = int(params[0]) if params else 2
        return degenerate(d)
    raise ModelError(f"unknown model {name!r}; choose from {', '.join(BUILTIN_MODELS)}")
