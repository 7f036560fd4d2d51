"""Randomised evaluation of compiled operators.

Random streams are derived from ``(seed, purpose, term, chunk)`` through
Philox, and replicates are processed in fixed-size chunks, so results do not
depend on how many workers run the chunks. Partial statistics are merged in
chunk order.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .operator_compiler import CompiledOperator, SignedTerm
from .scheme import GridProgram, InnovationSpec, SchemeTransition, simulate_batch
from .sde_model import SdeModel, TestFunction

log = logging.getLogger(__name__)

STRATEGIES = ("enumerate-all-terms", "sample-terms", "stratified-by-level")

# stream purposes
_PATH, _TERM, _CHOICE, _STRATUM = 0, 1, 2, 3

# doubles of shared path held per chunk
_CHUNK_BUDGET = 1 << 21


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    replicates: int
    strategy: str = "enumerate-all-terms"
    coupling: bool = True
    seed: int = 0
    width: int = 1
    chunk: int = 0  # 0: pick from the problem size

    def __post_init__(self):
        if self.replicates < 1:
            raise EstimatorError("need at least one replicate")
        if self.strategy not in STRATEGIES:
            raise EstimatorError(f"unknown strategy {self.strategy!r}")
        if self.width < 1:
            raise EstimatorError("parallelism width must be >= 1")


@dataclass
class EstimatorResult:
    value: float
    stderr: float
    replicates: int
    term_counts: tuple
    term_means: tuple
    term_variances: tuple
    wall_clock: float
    strategy: str = ""

    @property
    def effective_terms(self) -> int:
        return sum(1 for c in self.term_counts if c > 0)


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


@dataclass
class _Moments:
    """Count, mean and centred sum of squares, merged with Chan's update."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def of(cls, values: np.ndarray) -> "_Moments":
        if values.size == 0:
            return cls()
        shift = values[0]
        dev = values - shift
        mean = shift + float(np.mean(dev))
        return cls(values.size, mean, float(np.sum((values - mean) ** 2)))

    def merge(self, other: "_Moments") -> "_Moments":
        if other.count == 0:
            return self
        if self.count == 0:
            return _Moments(other.count, other.mean, other.m2)
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / n
        m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / n
        return _Moments(n, mean, m2)

    @property
    def variance(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else 0.0


def _neumaier(total, comp, x):
    t = total + x
    big = np.abs(total) >= np.abs(x)
    comp = comp + np.where(big, (total - t) + x, (x - t) + total)
    return t, comp


def _chunks(total: int, size: int) -> list:
    return [(k, min(size, total - k * size)) for k in range(-(-total // size))]


class _Problem:
    def __init__(self, op, model, transition, f, x0, spec, smoothing):
        self.op = op
        self.terms = op.terms
        self.model = model
        self.transition = transition
        self.f = f
        self.x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        self.spec = spec or InnovationSpec("gaussian", model.noise_dimension)
        if self.spec.dimension != model.noise_dimension:
            raise EstimatorError("innovation dimension differs from the model noise dimension")
        self.smoothing = smoothing
        self.coeffs = np.array([t.coeff for t in self.terms], dtype=float)

    def simulate(self, h: int, rng, size: int, increments=None, smoothing=True):
        return simulate_batch(self.transition, self.terms[h].program, self.x0, self.spec, rng,
                              size, self.smoothing if smoothing else None, increments, term=h)


class _SharedPath:
    """Brownian path on the union of all program grids."""

    def __init__(self, programs, noise_dim: int):
        finest = max(p.max_level for p in programs)
        bounds = [p.boundaries(finest) for p in programs]
        self.union = np.unique(np.concatenate(bounds))
        first = programs[0]
        unit = first.T / first.n ** finest
        self.root_dt = np.sqrt(np.diff(self.union) * unit)
        self.index = [np.searchsorted(self.union, b) for b in bounds]
        self.noise_dim = noise_dim

    def increments(self, rng, size: int) -> list:
        z = rng.standard_normal((self.root_dt.size, size, self.noise_dim))
        w = np.zeros((self.root_dt.size + 1, size, self.noise_dim))
        np.cumsum(self.root_dt[:, None, None] * z, axis=0, out=w[1:])
        return [w[idx[1:]] - w[idx[:-1]] for idx in self.index]


def _enumerate_chunk(prob: _Problem, cfg: EstimatorConfig, shared, chunk):
    k, size = chunk
    coupled = shared is not None
    rng = stream(cfg.seed, _PATH, k) if coupled else None
    incs = shared.increments(rng, size) if coupled else None
    if coupled and prob.smoothing is not None:
        theta, delta = prob.smoothing
        bump = delta ** theta * rng.standard_normal((size, prob.x0.size))
    total = np.zeros(size)
    comp = np.zeros(size)
    per_term = []
    for h in range(len(prob.terms)):
        if coupled:
            x = prob.simulate(h, None, size, incs[h], smoothing=False)
            if prob.smoothing is not None:
                x = x + bump
        else:
            x = prob.simulate(h, stream(cfg.seed, _TERM, h, k), size)
        fx = prob.f(x)
        per_term.append(_Moments.of(fx))
        total, comp = _neumaier(total, comp, prob.coeffs[h] * fx)
    return _Moments.of(total + comp), per_term


def _sample_chunk(prob: _Problem, cfg: EstimatorConfig, members, weight, purpose, key, chunk):
    """Draw terms among ``members`` with probability ``|c| / weight``; returns chunk moments."""
    k, size = chunk
    abs_c = np.abs(prob.coeffs[members])
    picks = stream(cfg.seed, purpose, key, k).choice(len(members), size=size, p=abs_c / abs_c.sum())
    counts = np.bincount(picks, minlength=len(members))
    values = []
    per_term = {}
    for j, h in enumerate(members):
        if counts[j] == 0:
            continue
        fx = prob.f(prob.simulate(h, stream(cfg.seed, _TERM, purpose, h, k), int(counts[j])))
        per_term[h] = _Moments.of(fx)
        values.append(math.copysign(weight, prob.coeffs[h]) * fx)
    return _Moments.of(np.concatenate(values)), per_term


def _run(tasks, width, fn):
    if width == 1 or len(tasks) == 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=width) as pool:
        return list(pool.map(fn, tasks))


def _chunk_size(cfg: EstimatorConfig, path_len: int) -> int:
    if cfg.chunk:
        return cfg.chunk
    return int(min(1 << 14, max(256, _CHUNK_BUDGET // max(1, path_len))))


def estimate(op: CompiledOperator, model: SdeModel, transition: SchemeTransition, f: TestFunction,
             x0, cfg: EstimatorConfig, spec: InnovationSpec = None, smoothing=None) -> EstimatorResult:
    """Unbiased Monte Carlo estimate of ``sum_h c_h E[f(X_T^{program_h})]``."""
    start = time.perf_counter()
    prob = _Problem(op, model, transition, f, x0, spec, smoothing)
    H = len(prob.terms)
    term_stats = [_Moments() for _ in range(H)]

    if cfg.strategy == "enumerate-all-terms":
        coupled = cfg.coupling
        if coupled and prob.spec.kind != "gaussian":
            log.warning("coupling needs Gaussian innovations; simulating terms independently")
            coupled = False
        shared = _SharedPath([t.program for t in prob.terms], model.noise_dimension) if coupled else None
        path_len = (shared.union.size if coupled else 1) * model.noise_dimension
        chunks = _chunks(cfg.replicates, _chunk_size(cfg, path_len))
        results = _run(chunks, cfg.width, lambda c: _enumerate_chunk(prob, cfg, shared, c))
        total = _Moments()
        for agg, per_term in results:
            total = total.merge(agg)
            for h, m in enumerate(per_term):
                term_stats[h] = term_stats[h].merge(m)
        value, stderr, reps = total.mean, math.sqrt(total.variance / total.count), total.count

    else:
        if cfg.strategy == "sample-terms":
            strata = [list(range(H))]
        else:
            levels = sorted({t.program.max_level for t in prob.terms})
            strata = [[h for h, t in enumerate(prob.terms) if t.program.max_level == lv]
                      for lv in levels]
        weights = [float(np.abs(prob.coeffs[s]).sum()) for s in strata]
        W = sum(weights)
        if len(strata) == 1:
            alloc = [cfg.replicates]
        else:
            alloc = [max(2, int(round(cfg.replicates * w / W))) for w in weights]
        purpose = _CHOICE if len(strata) == 1 else _STRATUM
        longest = max(t.program.step_count for t in prob.terms)
        size = _chunk_size(cfg, longest)
        value_parts, var_parts, reps = [], [], 0
        for g, (members, w, m_g) in enumerate(zip(strata, weights, alloc)):
            chunks = _chunks(m_g, size)
            results = _run(chunks, cfg.width,
                           lambda c: _sample_chunk(prob, cfg, members, w, purpose, g, c))
            agg = _Moments()
            for part, per_term in results:
                agg = agg.merge(part)
                for h, m in per_term.items():
                    term_stats[h] = term_stats[h].merge(m)
            value_parts.append(agg.mean)
            var_parts.append(agg.variance / agg.count)
            reps += agg.count
        value = math.fsum(value_parts)
        stderr = math.sqrt(math.fsum(var_parts))

    return EstimatorResult(
        value=value, stderr=stderr, replicates=reps,
        term_counts=tuple(m.count for m in term_stats),
        term_means=tuple(m.mean for m in term_stats),
        term_variances=tuple(m.variance for m in term_stats),
        wall_clock=time.perf_counter() - start, strategy=cfg.strategy)


def _pair_layout(plus: GridProgram, minus: GridProgram):
    """Return (fine, coarse) when the two programs differ by refining one coarse step."""
    if plus.n != minus.n or plus.T != minus.T:
        raise EstimatorError("terms live on different base grids")
    finest = max(plus.max_level, minus.max_level)
    bp, bm = set(plus.boundaries(finest).tolist()), set(minus.boundaries(finest).tolist())
    if bp > bm:
        fine, coarse, extra = plus, minus, bp - bm
    elif bm > bp:
        fine, coarse, extra = minus, plus, bm - bp
    else:
        raise EstimatorError("terms are not pairable: neither grid refines the other")
    cb = np.sort(np.fromiter(bm if fine is plus else bp, dtype=np.int64))
    k = np.searchsorted(cb, min(extra))
    if not (max(extra) < cb[k]):
        raise EstimatorError("terms are not pairable: refinement spans more than one slot")
    return fine, coarse


def coupled_pair_sample(plus: SignedTerm, minus: SignedTerm, model: SdeModel,
                        transition: SchemeTransition, f: TestFunction, x0,
                        rng: np.random.Generator, size: int = 1):
    """``(f(X^+), f(X^-))`` driven by one Brownian path.

    The coarse innovation over the refined slot is the aggregate of the fine
    ones, ``z_coarse = sum sqrt(h_fine) Z_fine / sqrt(h_coarse)``, so each
    side keeps its own Gaussian marginal law.
    """
    _pair_layout(plus.program, minus.program)
    shared = _SharedPath([plus.program, minus.program], model.noise_dimension)
    inc_plus, inc_minus = shared.increments(rng, size)
    spec = InnovationSpec("gaussian", model.noise_dimension)
    xp = simulate_batch(transition, plus.program, x0, spec, None, size, increments=inc_plus)
    xm = simulate_batch(transition, minus.program, x0, spec, None, size, increments=inc_minus)
    return f(xp), f(xm)
