"""Convergence studies: configuration parsing, evaluation loop, CSV reports."""

from __future__ import annotations

import csv
import io
import logging
import math
import re
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from . import sde_model
from .gaussian_oracle import evaluate_exact
from .monte_carlo import STRATEGIES, EstimatorConfig, estimate
from .operator_compiler import (DEFAULT_TERM_CAP, OrderParams, as_fraction, compile_operator,
                                horizon_floor, m_order)
from .scheme import TRANSITIONS, InnovationSpec

log = logging.getLogger(__name__)

CSV_COLUMNS = ("nu", "n", "mode", "x0", "f_id", "estimate", "reference", "abs_error", "stderr",
               "terms", "runtime_ms")
MODES = ("oracle", "enumerate", "sample")
NOISE_GUARD = 4.0


class ConfigError(ValueError):
    pass


# -- configuration -------------------------------------------------------------

CONFIG_KEYS = {
    "model": "model name",
    "params": "comma-separated model parameters",
    "transition": "one-step scheme (euler)",
    "nu": "comma-separated target orders (rationals allowed, e.g. 3/2)",
    "alpha": "weak smooth order of the scheme",
    "beta": "smoothness exponent of the short-time estimate (default 2 alpha + 2)",
    "n": "comma-separated, strictly increasing grid bases",
    "T": "horizon",
    "x0": "starting points separated by ';', coordinates by ','",
    "f": "test functions separated by ';': one, indicator(K[, a1, ...]), poly(c0, c1, ...), tv(k)",
    "mode": "oracle | enumerate | sample",
    "M": "Monte Carlo replicates",
    "seed": "master seed",
    "strategy": "sample-mode strategy: sample-terms | stratified-by-level",
    "coupling": "share Brownian increments across terms in enumerate mode (true/false)",
    "width": "worker threads",
    "theta": "terminal Gaussian smoothing exponent: none | auto | value",
    "innovation": "gaussian | truncated-gaussian | mixture-with-uniform",
    "innovation_params": "radius for truncated-gaussian; eps, radius for mixture-with-uniform",
    "term_cap": "maximum number of unfolded terms",
    "timing": "write measured runtimes into the CSV (true/false)",
    "out": "output path",
    "L": "Hormander order",
    "box": "sampling box per coordinate, 'lo:hi' separated by ','",
    "t_range": "time sampling range 'lo:hi'",
    "samples": "number of Hormander sample points",
}


def _floats(text: str) -> list:
    return [float(v) for v in text.replace(",", " ").split()]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _range(text: str) -> tuple:
    lo, sep, hi = text.partition(":")
    if not sep:
        raise ConfigError(f"expected 'lo:hi', got {text!r}")
    return float(lo), float(hi)


@dataclass
class StudyConfig:
    model: str
    params: tuple = ()
    transition: str = "euler"
    nu: tuple = (Fraction(1),)
    alpha: Fraction = Fraction(1)
    beta: Optional[int] = None
    n: tuple = (2, 4, 8, 16)
    T: float = 1.0
    x0: tuple = ()  # empty: the origin of the model dimension
    f: tuple = ("indicator(0)",)
    mode: str = "oracle"
    M: int = 100_000
    seed: int = 0
    strategy: str = "sample-terms"
    coupling: bool = True
    width: int = 1
    theta: Optional[str] = None
    innovation: str = "gaussian"
    innovation_params: tuple = ()
    term_cap: int = DEFAULT_TERM_CAP
    timing: bool = False
    out: Optional[str] = None
    L: int = 1
    box: tuple = ()
    t_range: tuple = (0.0, 1.0)
    samples: int = 200

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.transition not in TRANSITIONS:
            raise ConfigError(f"unknown transition {self.transition!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if any(v <= 0 for v in self.nu) or self.alpha <= 0:
            raise ConfigError("nu and alpha must be positive")
        if not self.n or any(int(b) < 2 for b in self.n):
            raise ConfigError("every n must be an integer >= 2")
        if any(b >= c for b, c in zip(self.n, self.n[1:])):
            raise ConfigError(f"n list must be strictly increasing: {self.n}")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ConfigError("T must be positive")
        if self.M < 1 or self.width < 1 or self.samples < 1:
            raise ConfigError("M, width and samples must be positive")
        return self

    def small_bases(self) -> dict:
        """Grid bases below ``m(0, nu) + 1``, per ``nu``; allowed but pre-asymptotic."""
        out = {}
        for nu in self.nu:
            small = [b for b in self.n if b < m_order(0, nu, self.alpha) + 1]
            if small:
                out[nu] = small
        return out

    def theta_for(self, nu) -> Optional[float]:
        if self.theta is None or self.theta == "none":
            return None
        if self.theta == "auto":
            return float(nu + m_order(0, nu, self.alpha))
        return float(self.theta)


def parse_config(text: str) -> StudyConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    if "model" not in raw:
        raise ConfigError("missing required key 'model'")
    try:
        kw = {"model": raw["model"]}
        if "params" in raw:
            kw["params"] = tuple(_floats(raw["params"]))
        for key in ("transition", "mode", "strategy", "innovation", "out"):
            if key in raw:
                kw[key] = raw[key]
        if "nu" in raw:
            kw["nu"] = tuple(as_fraction(v) for v in raw["nu"].replace(",", " ").split())
        if "alpha" in raw:
            kw["alpha"] = as_fraction(raw["alpha"])
        for key in ("beta", "M", "seed", "width", "term_cap", "L", "samples"):
            if key in raw:
                kw[key] = int(raw[key])
        if "n" in raw:
            kw["n"] = tuple(int(v) for v in raw["n"].replace(",", " ").split())
        if "T" in raw:
            kw["T"] = float(raw["T"])
        if "x0" in raw:
            kw["x0"] = tuple(tuple(_floats(p)) for p in raw["x0"].split(";") if p.strip())
        if "f" in raw:
            kw["f"] = tuple(s.strip() for s in raw["f"].split(";") if s.strip())
        for key in ("coupling", "timing"):
            if key in raw:
                kw[key] = _bool(raw[key])
        if "theta" in raw:
            th = raw["theta"].lower()
            if th not in ("none", "auto"):
                float(th)
            kw["theta"] = th
        if "innovation_params" in raw:
            kw["innovation_params"] = tuple(_floats(raw["innovation_params"]))
        if "box" in raw:
            kw["box"] = tuple(_range(p) for p in raw["box"].split(","))
        if "t_range" in raw:
            kw["t_range"] = _range(raw["t_range"])
    except (ValueError, ZeroDivisionError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return StudyConfig(**kw).validate()


_CALL = re.compile(r"^\s*([a-z]+)\s*(?:\((.*)\))?\s*$")


def parse_test_functions(spec: str, dimension: int, law=None, x0=None, T=1.0) -> list:
    """Test functions named by a config string; ``tv(k)`` expands to ``k`` indicators."""
    m = _CALL.match(spec)
    if not m:
        raise ConfigError(f"bad test function {spec!r}")
    name, args = m.group(1), _floats(m.group(2) or "")
    e1 = (1.0,) + (0.0,) * (dimension - 1)
    if name == "one":
        return [sde_model.constant(1.0, dimension)]
    if name == "indicator":
        if not args:
            raise ConfigError("indicator needs a threshold")
        direction = tuple(args[1:]) or e1
        if len(direction) != dimension:
            raise ConfigError(f"indicator direction must have {dimension} components")
        return [sde_model.indicator(args[0], direction)]
    if name == "poly":
        return [sde_model.polynomial(args, dimension)]
    if name == "tv":
        k = int(args[0]) if args else 21
        if law is None or law.kind == "none":
            raise ConfigError("tv() thresholds need a reference law")
        mean, cov = law.mean_cov(x0, T)
        sd = math.sqrt(max(cov[0, 0], 0.0))
        return [sde_model.indicator(mean[0] + sd * u, e1) for u in np.linspace(-3, 3, k)]
    raise ConfigError(f"unknown test function {name!r}")


def innovation_spec(cfg: StudyConfig, noise_dim: int) -> InnovationSpec:
    p = cfg.innovation_params
    try:
        if cfg.innovation == "gaussian":
            return InnovationSpec("gaussian", noise_dim)
        if cfg.innovation == "truncated-gaussian":
            return InnovationSpec("truncated-gaussian", noise_dim, radius=p[0] if p else 3.0)
        if cfg.innovation == "mixture-with-uniform":
            eps, radius = (p + (0.1, 1.0)[len(p):])[:2]
            return InnovationSpec("mixture-with-uniform", noise_dim, radius=radius, eps=eps)
    except (ValueError, IndexError) as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown innovation {cfg.innovation!r}")


# -- report --------------------------------------------------------------------------

@dataclass
class ReportRow:
    nu: Fraction
    n: int
    mode: str
    x0: tuple
    f_id: str
    estimate: float
    reference: float
    abs_error: float
    stderr: float
    terms: int
    runtime_ms: float

    @property
    def resolvable(self) -> bool:
        """Bias visible above Monte Carlo noise."""
        return (math.isfinite(self.abs_error) and self.abs_error > 0
                and self.abs_error > NOISE_GUARD * self.stderr)


@dataclass
class ConvergenceReport:
    rows: list
    slopes: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def _fmt(v) -> str:
    if isinstance(v, Fraction):
        return str(v.numerator) if v.denominator == 1 else f"{v.numerator}/{v.denominator}"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report_csv(rows, fh, timing: bool = False):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.nu), r.n, r.mode, " ".join(repr(float(c)) for c in r.x0), r.f_id,
                    _fmt(float(r.estimate)), _fmt(float(r.reference)), _fmt(float(r.abs_error)),
                    _fmt(float(r.stderr)), r.terms, _fmt(float(r.runtime_ms) if timing else 0.0)])


def read_report_csv(fh) -> list:
    reader = csv.DictReader(fh)
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    return [ReportRow(Fraction(r["nu"]), int(r["n"]), r["mode"],
                      tuple(float(c) for c in r["x0"].split()), r["f_id"], float(r["estimate"]),
                      float(r["reference"]), float(r["abs_error"]), float(r["stderr"]),
                      int(r["terms"]), float(r["runtime_ms"]))
            for r in reader]


def fit_rate(ns, errors) -> float:
    """Decay rate ``p`` in ``error ~ C n^-p`` by least squares on the log-log points."""
    ns, errors = np.asarray(ns, float), np.asarray(errors, float)
    if ns.size < 2:
        return math.nan
    slope = np.polyfit(np.log(ns), np.log(errors), 1)[0]
    return float(-slope)


def fit_report_slopes(rows) -> tuple:
    """Rate per ``nu`` from the worst resolvable error at each ``n``; also the excluded points."""
    slopes, excluded = {}, {}
    for nu in sorted({r.nu for r in rows}):
        worst = {}
        for r in rows:
            if r.nu != nu:
                continue
            if r.resolvable:
                worst[r.n] = max(worst.get(r.n, 0.0), r.abs_error)
            else:
                excluded.setdefault(_fmt(nu), []).append((r.n, r.f_id))
        ns = sorted(worst)
        slopes[nu] = fit_rate(ns, [worst[k] for k in ns])
    return slopes, excluded


# -- evaluation --------------------------------------------------------------------------

def load_model(cfg: StudyConfig):
    model, law = sde_model.builtin_model(cfg.model, cfg.params)
    if not cfg.x0:
        cfg.x0 = ((0.0,) * model.dimension,)
    for x0 in cfg.x0:
        if len(x0) != model.dimension:
            raise ConfigError(f"x0 {x0} has {len(x0)} coordinates, model needs {model.dimension}")
    return model, law


def _row_seed(seed: int, *keys) -> int:
    return int(np.random.SeedSequence([int(seed), *keys]).generate_state(1)[0])


def evaluate_rows(cfg: StudyConfig, nu, n: int, model, law, require_reference: bool, keys=()):
    """Evaluate every ``(x0, f)`` pair for one ``(nu, n)``."""
    params = OrderParams(nu, cfg.alpha, n, cfg.T, cfg.beta)
    op = compile_operator(params, cfg.term_cap)
    theta = cfg.theta_for(nu)
    smoothing = None if theta is None else (theta, cfg.T / n)
    transition = TRANSITIONS[cfg.transition](model)
    spec = innovation_spec(cfg, model.noise_dimension)
    has_law = law.kind != "none"
    if require_reference and not has_law:
        raise ConfigError(f"model {cfg.model!r} has no reference law for these parameters")
    rows = []
    for xi, x0 in enumerate(cfg.x0):
        fs = [g for s in cfg.f for g in parse_test_functions(s, model.dimension, law, x0, cfg.T)]
        for fi, f in enumerate(fs):
            start = time.perf_counter()
            if cfg.mode == "oracle":
                value, se = evaluate_exact(op, model, f, x0, smoothing), 0.0
            else:
                strategy = "enumerate-all-terms" if cfg.mode == "enumerate" else cfg.strategy
                ecfg = EstimatorConfig(cfg.M, strategy, cfg.coupling,
                                       _row_seed(cfg.seed, *keys, n, xi, fi), cfg.width)
                res = estimate(op, model, transition, f, x0, ecfg, spec, smoothing)
                value, se = res.value, res.stderr
            elapsed = 1e3 * (time.perf_counter() - start)
            ref = law.expectation(f, x0, cfg.T) if has_law else math.nan
            rows.append(ReportRow(as_fraction(nu), n, cfg.mode, tuple(x0), f.id, value, ref,
                                  abs(value - ref), se, len(op), elapsed))
    return op, rows


def run_study(cfg: StudyConfig) -> ConvergenceReport:
    model, law = load_model(cfg)
    rows, meta = [], {}
    for k, nu in enumerate(cfg.nu):
        info = {"T_nu": {}}
        for n in cfg.n:
            op, new = evaluate_rows(cfg, nu, n, model, law, True, keys=(k,))
            rows.extend(new)
            info["T_nu"][n] = horizon_floor(nu, cfg.alpha, n, cfg.T)
            info.update({key: op.metadata[key] for key in ("m0", "l_max", "beta", "kappa", "q_nu")})
        theta = cfg.theta_for(nu)
        info["theta"] = theta
        info["q_nu_note"] = ("q_nu uses kappa(1, q_i(0, nu)); an argument order (nu, 0) "
                             "is read as a transposition, i in 1..m(0, nu)")
        meta[_fmt(as_fraction(nu))] = info
    slopes, excluded = fit_report_slopes(rows)
    meta["excluded_from_fit"] = excluded
    return ConvergenceReport(rows, slopes, meta)


def report_csv_text(report: ConvergenceReport, timing=False) -> str:
    buf = io.StringIO()
    write_report_csv(report.rows, buf, timing)
    return buf.getvalue()
