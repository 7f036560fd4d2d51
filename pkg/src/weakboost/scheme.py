"""One-step transitions, innovation laws and simulation on nested time grids."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np
from scipy.special import gammaln

from .sde_model import SdeModel


class NonFiniteStateError(FloatingPointError):
    """A simulated state became NaN or infinite."""

    def __init__(self, step, term=None):
        self.step = step
        self.term = term
        where = f" (term {term})" if term is not None else ""
        super().__init__(f"non-finite state at step {step}{where}")


@dataclass(frozen=True)
class SchemeTransition:
    """One-step map ``psi(x, t, z, y)`` where ``z`` is the scaled innovation.

    ``order`` is the weak smooth order; ``constants`` holds optional
    user-declared derivative bounds ``{r: (D_r, p_r)}``.
    """

    step: Callable
    order: float
    name: str = "custom"
    constants: dict = field(default_factory=dict)

    def __call__(self, x, t, z, y):
        return self.step(x, t, z, y)


def euler_transition(model: SdeModel) -> SchemeTransition:
    drift = model.drift
    diffusion = model.diffusion

    def psi(x, t, z, y):
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        out = x + drift(x, t) * y
        for i, v in enumerate(diffusion):
            out = out + v(x, t) * z[..., i:i + 1]
        return out

    return SchemeTransition(psi, 1.0, name="euler")


TRANSITIONS = {"euler": euler_transition}


# -- innovations ---------------------------------------------------------------

def ball_volume(dim: int, radius: float) -> float:
    return math.exp(0.5 * dim * math.log(math.pi) - gammaln(0.5 * dim + 1)) * radius ** dim


@dataclass(frozen=True)
class InnovationSpec:
    """Law of the centred, unit-covariance innovations ``Z``.

    ``mixture-with-uniform`` draws uniformly on ``B(center, radius)`` with
    probability ``eps * vol(B)`` and otherwise from a Gaussian chosen to
    restore zero mean and identity covariance, so its density is at least
    ``eps`` on the ball. ``rademacher`` is provided for negative tests only:
    it has no Lebesgue lower bound.
    """

    kind: str = "gaussian"
    dimension: int = 1
    radius: float = 3.0
    eps: float = 0.0
    center: tuple = ()

    def __post_init__(self):
        if self.kind not in ("gaussian", "truncated-gaussian", "mixture-with-uniform", "rademacher"):
            raise ValueError(f"unknown innovation kind {self.kind!r}")
        if self.kind == "mixture-with-uniform":
            p = self.uniform_weight
            if not 0.0 < p < 1.0:
                raise ValueError(f"uniform weight eps*vol(B) = {p:.3g} must lie in (0, 1)")
            cov = self._gaussian_part()[1]
            if np.min(np.linalg.eigvalsh(cov)) <= 0:
                raise ValueError("mixture cannot be centred with identity covariance")

    @property
    def uniform_weight(self) -> float:
        return self.eps * ball_volume(self.dimension, self.radius)

    @property
    def lebesgue_lower_bounded(self) -> bool:
        return self.kind != "rademacher"

    def _center(self):
        if self.center:
            return np.asarray(self.center, dtype=float)
        return np.zeros(self.dimension)

    def _gaussian_part(self):
        p = self.uniform_weight
        n = self.dimension
        z = self._center()
        mu = -p * z / (1 - p)
        second = (np.eye(n) - p * (np.outer(z, z) + self.radius ** 2 / (n + 2) * np.eye(n))) / (1 - p)
        return mu, second - np.outer(mu, mu)

    def _truncated_scale(self):
        r = self.radius
        # variance of N(0,1) restricted to [-r, r]
        phi = math.exp(-0.5 * r * r) / math.sqrt(2 * math.pi)
        mass = math.erf(r / math.sqrt(2))
        return 1.0 / math.sqrt(1.0 - 2 * r * phi / mass)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """``size`` independent draws, shape ``(size, dimension)``."""
        n = self.dimension
        if self.kind == "gaussian":
            return rng.standard_normal((size, n))
        if self.kind == "rademacher":
            return rng.choice(np.array([-1.0, 1.0]), size=(size, n))
        if self.kind == "truncated-gaussian":
            out = rng.standard_normal((size, n))
            bad = np.abs(out) > self.radius
            while bad.any():
                out[bad] = rng.standard_normal(int(bad.sum()))
                bad = np.abs(out) > self.radius
            return out * self._truncated_scale()
        p = self.uniform_weight
        mu, cov = self._gaussian_part()
        pick = rng.random(size) < p
        direction = rng.standard_normal((size, n))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radial = self.radius * rng.random(size) ** (1.0 / n)
        uniform = self._center() + direction * radial[:, None]
        gauss = mu + rng.standard_normal((size, n)) @ np.linalg.cholesky(cov).T
        return np.where(pick[:, None], uniform, gauss)

    def moment(self, p: float) -> float:
        """``1 v E|Z|^p``: exact for Gaussian, an upper bound for bounded laws, sampled for mixtures."""
        n = self.dimension
        if self.kind == "gaussian":
            return max(1.0, math.exp(0.5 * p * math.log(2) + gammaln(0.5 * (n + p)) - gammaln(0.5 * n)))
        if self.kind == "rademacher":
            return max(1.0, n ** (0.5 * p))
        if self.kind == "truncated-gaussian":
            return max(1.0, (math.sqrt(n) * self.radius * self._truncated_scale()) ** p)
        rng = np.random.default_rng(0)
        z = self.sample(rng, 200_000)
        return max(1.0, float(np.mean(np.linalg.norm(z, axis=1) ** p)))


def sample_innovation(spec: InnovationSpec, rng: np.random.Generator) -> np.ndarray:
    return spec.sample(rng, 1)[0]


# -- grid programs -------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    step: float
    level: int
    steps: int


@dataclass(frozen=True)
class GridProgram:
    """Time-ordered ``(level, steps)`` pieces; a level-``k`` step has length ``T / n**k``.

    Adjacent pieces of equal level are merged and empty pieces dropped, so
    equal schedules compare equal.
    """

    pieces: tuple
    n: int
    T: float = 1.0

    def __post_init__(self):
        merged = []
        for level, count in self.pieces:
            level, count = int(level), int(count)
            if level < 1 or count < 0:
                raise ValueError(f"invalid piece {(level, count)}")
            if count == 0:
                continue
            if merged and merged[-1][0] == level:
                merged[-1] = (level, merged[-1][1] + count)
            else:
                merged.append((level, count))
        object.__setattr__(self, "pieces", tuple(merged))
        if self.n < 2:
            raise ValueError("grid base n must be at least 2")
        if self.span_units() != self.n ** self.max_level:
            raise ValueError(f"pieces {self.pieces} do not cover [0, T]")

    @classmethod
    def uniform(cls, level: int, n: int, T: float = 1.0) -> "GridProgram":
        return cls(((level, n ** level),), n, T)

    @property
    def max_level(self) -> int:
        return max(level for level, _ in self.pieces)

    @property
    def step_count(self) -> int:
        return sum(count for _, count in self.pieces)

    def span_units(self, finest=None) -> int:
        finest = self.max_level if finest is None else finest
        return sum(count * self.n ** (finest - level) for level, count in self.pieces)

    def boundaries(self, finest=None) -> np.ndarray:
        """Grid points as integers in units of ``T / n**finest``."""
        finest = self.max_level if finest is None else finest
        units = np.concatenate([np.full(count, self.n ** (finest - level), dtype=np.int64)
                                for level, count in self.pieces])
        return np.concatenate([[0], np.cumsum(units)])

    @property
    def segments(self) -> list:
        out = []
        pos = Fraction(0)
        for level, count in self.pieces:
            step = Fraction(1, self.n ** level)
            end = pos + count * step
            out.append(Segment(float(pos) * self.T, float(end) * self.T,
                               self.T / self.n ** level, level, count))
            pos = end
        return out

    def step_schedule(self):
        """Per-step start times and lengths, as float arrays."""
        finest = self.max_level
        b = self.boundaries(finest)
        unit = self.T / self.n ** finest
        return b[:-1] * unit, np.diff(b) * unit

    def text(self) -> str:
        return " ".join(f"{level}:{count}" for level, count in self.pieces)


# -- simulation ----------------------------------------------------------------------

def simulate_batch(transition: SchemeTransition, program: GridProgram, x0, spec: InnovationSpec,
                   rng: np.random.Generator, size: int, smoothing=None, increments=None,
                   term=None) -> np.ndarray:
    """Terminal states of ``size`` independent paths, shape ``(size, d)``.

    ``increments`` (shape ``(steps, size, N)``) replaces the sampled scaled
    innovations ``sqrt(step) * Z``; used for coupled simulation.
    ``smoothing = (theta, delta)`` adds ``delta**theta * G`` at the end.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    times, steps = program.step_schedule()
    x = np.broadcast_to(x0, (size, x0.size)).copy()
    for k, (t, h) in enumerate(zip(times, steps)):
        if increments is None:
            z = math.sqrt(h) * spec.sample(rng, size)
        else:
            z = increments[k]
        x = transition(x, float(t), z, float(h))
        if not np.all(np.isfinite(x)):
            raise NonFiniteStateError(k, term)
    if smoothing is not None:
        theta, delta = smoothing
        x = x + delta ** theta * rng.standard_normal(x.shape)
    return x


def simulate_terminal(transition: SchemeTransition, program: GridProgram, x0, spec: InnovationSpec,
                      rng: np.random.Generator, smoothing=None) -> np.ndarray:
    """Single terminal state ``X_T`` on ``program``."""
    return simulate_batch(transition, program, x0, spec, rng, 1, smoothing)[0]
