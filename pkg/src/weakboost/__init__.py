"""Arbitrary-order weak approximation of SDEs by signed combinations of Euler schemes."""

from .gaussian_oracle import evaluate_exact, evaluate_recursive
from .hormander import bracket_basis, certify_A2, hormander_functional, lie_bracket
from .monte_carlo import EstimatorConfig, EstimatorResult, estimate
from .operator_compiler import (CompiledOperator, OrderParams, compile_operator, from_text,
                                kappa_smoothness, m_order, q_nu, q_order, to_text)
from .scheme import GridProgram, InnovationSpec, euler_transition, simulate_batch
from .sde_model import SdeModel, TestFunction, builtin_model, constant, indicator, polynomial
from .study import StudyConfig, parse_config, run_study

__all__ = [
    "CompiledOperator", "EstimatorConfig", "EstimatorResult", "GridProgram", "InnovationSpec",
    "OrderParams", "SdeModel", "StudyConfig", "TestFunction", "bracket_basis", "builtin_model",
    "certify_A2", "compile_operator", "constant", "estimate", "euler_transition", "evaluate_exact",
    "evaluate_recursive", "from_text", "hormander_functional", "indicator", "kappa_smoothness",
    "lie_bracket", "m_order", "parse_config", "polynomial", "q_nu", "q_order", "run_study",
    "simulate_batch", "to_text",
]
