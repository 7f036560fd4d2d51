"""Command-line front end.

    weakboost compile   --config study.cfg
    weakboost estimate  --config study.cfg --mode sample --seed 7
    weakboost converge  --config study.cfg --out report.csv
    weakboost hormander --config model.cfg

Exit status: 0 on success, 2 for configuration errors, 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
from fractions import Fraction

from .gaussian_oracle import OracleError
from .hormander import DerivativeDepthError, certify_A2
from .monte_carlo import EstimatorError
from .operator_compiler import CompileError, OrderParams, TermCapExceeded, compile_operator, to_text
from .scheme import TRANSITIONS, NonFiniteStateError
from .sde_model import ModelError
from .study import (MODES, ConfigError, evaluate_rows, fit_report_slopes, load_model, parse_config,
                    run_study, write_report_csv)

log = logging.getLogger("weakboost")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weakboost", description="High-order weak approximation of SDEs")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("compile", "print the compiled operator"),
                        ("estimate", "evaluate the operator at the first grid base"),
                        ("converge", "run a convergence study"),
                        ("hormander", "sample the Hormander functional")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="key = value configuration file")
        s.add_argument("--seed", type=int, help="override the configured seed")
        s.add_argument("--out", help="output path (default: stdout)")
        s.add_argument("--mode", choices=MODES, help="override the evaluation mode")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


@contextlib.contextmanager
def _output(path):
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            yield fh


def _load(args):
    try:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    cfg = parse_config(text)
    overrides = {k: getattr(args, k) for k in ("seed", "out", "mode") if getattr(args, k) is not None}
    return dataclasses.replace(cfg, **overrides).validate()


def _fmt(nu: Fraction) -> str:
    return str(nu.numerator) if nu.denominator == 1 else f"{nu.numerator}/{nu.denominator}"


def _compile(cfg):
    with _output(cfg.out) as fh:
        for nu in cfg.nu:
            for n in cfg.n:
                fh.write(to_text(compile_operator(OrderParams(nu, cfg.alpha, n, cfg.T, cfg.beta),
                                                  cfg.term_cap)))


def _estimate(cfg):
    model, law = load_model(cfg)
    _, rows = evaluate_rows(cfg, cfg.nu[0], cfg.n[0], model, law, require_reference=False)
    with _output(cfg.out) as fh:
        write_report_csv(rows, fh, cfg.timing)


def _converge(cfg):
    report = run_study(cfg)
    with _output(cfg.out) as fh:
        write_report_csv(report.rows, fh, cfg.timing)
    for nu, slope in report.slopes.items():
        print(f"nu={_fmt(nu)} fitted rate {slope:.4f}", file=sys.stderr)
    _, excluded = fit_report_slopes(report.rows)
    for nu, pts in excluded.items():
        print(f"nu={nu}: {len(pts)} rows below the noise guard, excluded from the fit",
              file=sys.stderr)
    if cfg.out:
        meta = {"slopes": {_fmt(k): v for k, v in report.slopes.items()}, **report.metadata}
        with open(cfg.out + ".json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def _hormander(cfg):
    model, _ = load_model(cfg)
    box = cfg.box or ((-1.0, 1.0),)
    if len(box) == 1:
        box = box * model.dimension
    if len(box) != model.dimension:
        raise ConfigError(f"box has {len(box)} ranges, model dimension is {model.dimension}")
    transition = TRANSITIONS[cfg.transition](model)
    report = certify_A2(model, cfg.L, box, cfg.samples, cfg.t_range, cfg.seed, transition)
    with _output(cfg.out) as fh:
        report.write_csv(fh)
    verdict = "positive" if report.passed else "ZERO"
    print(f"min V_{cfg.L} = {report.min_value:.6g} at x={report.argmin_x}, t={report.argmin_t:.6g} "
          f"({verdict} over {cfg.samples} samples; a sampled check, not a proof)", file=sys.stderr)


COMMANDS = {"compile": _compile, "estimate": _estimate, "converge": _converge,
            "hormander": _hormander}


def cli(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        for nu, small in cfg.small_bases().items():
            log.warning("nu=%s: n=%s below m(0,nu)+1; the rate is asymptotic in n", _fmt(nu), small)
        COMMANDS[args.command](cfg)
    except (TermCapExceeded, NonFiniteStateError, FloatingPointError, DerivativeDepthError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ModelError, CompileError, OracleError, EstimatorError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main():
    sys.exit(cli())
