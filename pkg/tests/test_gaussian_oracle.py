import math

import numpy as np
import pytest
from scipy.special import ndtr

from weakboost.gaussian_oracle import (AffineModelView, OracleError, evaluate_exact,
                                       evaluate_recursive, operator_error, program_expectation,
                                       propagate_law, propagate_moments)
from weakboost.operator_compiler import OrderParams, compile_operator
from weakboost.scheme import GridProgram, InnovationSpec, euler_transition, simulate_batch
from weakboost.sde_model import (brownian, builtin_model, constant, geometric, indicator, linear_ou,
                                 polynomial)


def _uniform_ou(x0, a, s, delta, n):
    """Hand closed form for n Euler steps of size delta."""
    u = 1 + a * delta
    return x0 * u ** n, s * s * delta * sum(u ** (2 * j) for j in range(n))


def test_brownian_any_program():
    model, _ = brownian(2)
    for prog in [GridProgram.uniform(2, 3), GridProgram(((1, 1), (2, 3), (1, 1)), 3)]:
        mu, S = propagate_law(model, prog, [0.5, -1.0])
        np.testing.assert_allclose(mu, [0.5, -1.0])
        np.testing.assert_allclose(S, np.eye(2), atol=1e-15)


@pytest.mark.parametrize("n", [2, 3, 8])
def test_ou_uniform_grid(n):
    a, s = -0.8, 0.6
    model, _ = linear_ou(a, s)
    mu, S = propagate_law(model, GridProgram(((1, n),), n, 1.0), [1.5])
    m, v = _uniform_ou(1.5, a, s, 1.0 / n, n)
    assert mu[0] == pytest.approx(m, rel=1e-14)
    assert S[0, 0] == pytest.approx(v, rel=1e-13)


def test_ou_mixed_program_is_composition():
    a, s, n = -1.0, 1.0, 4
    model, _ = linear_ou(a, s)
    prog = GridProgram(((1, 1), (2, 4), (1, 2)), n)
    m, v = _uniform_ou(0.7, a, s, 1 / 4, 1)
    # refined slot: 4 fine steps starting from N(m, v)
    u = 1 + a / 16
    m, v = m * u ** 4, v * u ** 8 + _uniform_ou(0.0, a, s, 1 / 16, 4)[1]
    u = 1 + a / 4
    m, v = m * u ** 2, v * u ** 4 + _uniform_ou(0.0, a, s, 1 / 4, 2)[1]
    mu, S = propagate_law(model, prog, [0.7])
    assert mu[0] == pytest.approx(m, rel=1e-14) and S[0, 0] == pytest.approx(v, rel=1e-13)


def test_time_dependent_coefficients_step_by_step():
    from weakboost.sde_model import AffineCoefficients, SdeModel
    A = lambda t: np.array([[-1.0 - t]])
    model = SdeModel("tdep", 1, 1, lambda x, t: (-1.0 - t) * x, (lambda x, t: np.ones_like(x),),
                     affine=AffineCoefficients(A, lambda t: np.array([t]), lambda t: np.array([[1.0]]),
                                               homogeneous=False))
    mu, S = propagate_law(model, GridProgram.uniform(1, 2), [1.0])
    m1 = 1.0 + (-1.0) * 0.5 * 1.0 + 0.0
    v1 = 0.5
    m2 = m1 * (1 - 1.5 * 0.5) + 0.5 * 0.5
    v2 = v1 * (1 - 1.5 * 0.5) ** 2 + 0.5
    assert mu[0] == pytest.approx(m2) and S[0, 0] == pytest.approx(v2)


def test_brownian_indicator_is_half():
    model, _ = brownian(1)
    for nu in (1, 2, 3):
        op = compile_operator(OrderParams(nu, 1, 3))
        assert evaluate_exact(op, model, indicator(0.0), [0.0]) == pytest.approx(0.5, abs=1e-14)


def test_plain_euler_indicator_value():
    model, _ = linear_ou(-1.0, 1.0)
    op = compile_operator(OrderParams(1, 1, 4))
    m, v = _uniform_ou(1.0, -1.0, 1.0, 0.25, 4)
    want = float(ndtr((0.3 - m) / math.sqrt(v)))
    assert evaluate_exact(op, model, indicator(0.3), [1.0]) == pytest.approx(want, abs=1e-15)


def test_order_two_error_slope():
    model, law = linear_ou(-1.0, 1.0)
    f = indicator(0.0)
    ns = [2, 4, 8, 16]
    errs = [abs(operator_error(compile_operator(OrderParams(2, 1, n)), model, law, f, [1.0]))
            for n in ns]
    slope = -np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert 1.7 <= slope <= 2.3


@pytest.mark.parametrize("nu,n", [(2, 3), (3, 2), (3, 3), (2.5, 3)])
def test_compiled_matches_recursive_definition(nu, n):
    model, _ = linear_ou(-0.7, 0.9)
    params = OrderParams(nu, 1, n)
    op = compile_operator(params)
    for f in (indicator(0.2), polynomial([0.0, 1.0, 1.0, -0.3])):
        a = evaluate_exact(op, model, f, [0.6])
        b = evaluate_recursive(params, model, f, [0.6])
        assert a == pytest.approx(b, rel=1e-12, abs=1e-13)


def test_linearity_in_coefficients():
    model, _ = linear_ou(-1.0, 0.5)
    op = compile_operator(OrderParams(3, 1, 3))
    p, q = polynomial([1.0, -2.0, 0.5]), polynomial([0.0, 0.3, 0.0, 1.0])
    pq = polynomial([2 * 1.0 + 3 * 0.0, 2 * -2.0 + 3 * 0.3, 2 * 0.5, 3 * 1.0])
    lhs = evaluate_exact(op, model, pq, [0.4])
    rhs = 2 * evaluate_exact(op, model, p, [0.4]) + 3 * evaluate_exact(op, model, q, [0.4])
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("nu", [1, 2, 3])
def test_mass_one(nu):
    model, _ = builtin_model("kinetic-example", (0.1, -1.0, 0.8, 0.0))
    op = compile_operator(OrderParams(nu, 1, 5))
    assert abs(evaluate_exact(op, model, constant(1.0, 2), [0.2, 0.1]) - 1) <= 1e-12


def test_geometric_moments_match_hand_recursion():
    a, s, n = 0.2, 0.4, 4
    model, _ = geometric(a, s)
    h = 1.0 / n
    mom = propagate_moments(model, GridProgram.uniform(1, n), [1.5], 2)
    assert mom[1] == pytest.approx(1.5 * (1 + a * h) ** n)
    assert mom[2] == pytest.approx(1.5 ** 2 * ((1 + a * h) ** 2 + s * s * h) ** n)
    with pytest.raises(OracleError):
        program_expectation(model, GridProgram.uniform(1, n), indicator(1.0), [1.5])


def test_smoothing_adds_variance():
    model, _ = linear_ou(-1.0, 1.0)
    prog = GridProgram.uniform(1, 4)
    f = polynomial([0.0, 0.0, 1.0])
    base = program_expectation(model, prog, f, [1.0])
    smoothed = program_expectation(model, prog, f, [1.0], smoothing=(2, 0.25))
    assert smoothed - base == pytest.approx(0.25 ** 4, rel=1e-10)


def test_non_affine_model_rejected():
    model, _ = builtin_model("kinetic-example", (0.1, -1.0, 1.0, 0.2))
    with pytest.raises(OracleError):
        AffineModelView(model)


@pytest.mark.parametrize("name,params,x0", [
    ("linear-ou", (-1.0, 0.7), (0.5,)),
    ("brownian", (2,), (0.0, 1.0)),
    ("kinetic-example", (0.2, -0.5, 0.7, 0.0), (0.3, -0.1)),
    ("degenerate", (), (0.0, 0.0)),
])
def test_oracle_matches_simulation(name, params, x0):
    model, _ = builtin_model(name, params)
    psi = euler_transition(model)
    rng = np.random.default_rng(11)
    progs = [GridProgram.uniform(1, 3), GridProgram.uniform(2, 3), GridProgram(((1, 1), (2, 3), (1, 1)), 3),
             GridProgram(((2, 3), (1, 2)), 3), GridProgram(((1, 1), (2, 2)), 2)]
    M = 10 ** 6
    for prog in progs:
        x = simulate_batch(psi, prog, x0, InnovationSpec(dimension=model.noise_dimension), rng, M)
        mu, S = propagate_law(model, prog, x0)
        sd = np.sqrt(np.maximum(np.diag(S), 0))
        assert np.all(np.abs(x.mean(axis=0) - mu) <= 4 * sd / math.sqrt(M) + 1e-15)
        emp = np.cov(x.T).reshape(S.shape)
        # se of a sample covariance entry: sqrt((S_ii S_jj + S_ij^2) / M)
        se = np.sqrt((np.outer(np.diag(S), np.diag(S)) + S ** 2) / M)
        assert np.all(np.abs(emp - S) <= 4 * se + 1e-15)
