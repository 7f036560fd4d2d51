import math

import numpy as np
import pytest

from weakboost.gaussian_oracle import evaluate_exact
from weakboost.monte_carlo import (EstimatorConfig, EstimatorError, coupled_pair_sample, estimate,
                                   stream)
from weakboost.operator_compiler import OrderParams, SignedTerm, compile_operator
from weakboost.scheme import GridProgram, InnovationSpec, euler_transition
from weakboost.sde_model import SdeModel, brownian, indicator, linear_ou, polynomial

STRATS = ("enumerate-all-terms", "sample-terms", "stratified-by-level")


@pytest.fixture(scope="module")
def ou_problem():
    model, _ = linear_ou(-1.0, 1.0)
    op = compile_operator(OrderParams(2, 1, 4))
    f = indicator(0.0)
    return op, model, euler_transition(model), f, evaluate_exact(op, model, f, [1.0])


@pytest.mark.parametrize("strategy", STRATS)
def test_deterministic_model_is_exact(strategy):
    a = -0.5
    model = SdeModel("ode", 1, 1, lambda x, t: a * np.asarray(x, float),
                     (lambda x, t: np.zeros_like(np.asarray(x, float)),))
    op = compile_operator(OrderParams(3, 1, 3))
    f = polynomial([0.0, 1.0, 1.0])
    res = estimate(op, model, euler_transition(model), f, [2.0], EstimatorConfig(500, strategy, seed=3))
    want = 0.0
    for t in op.terms:
        _, steps = t.program.step_schedule()
        x = 2.0 * np.prod(1 + a * steps)
        want += t.coeff * (x + x * x)
    if strategy == "enumerate-all-terms":
        assert res.stderr == 0.0 and res.value == pytest.approx(want, rel=1e-12)
    else:
        # term sampling is exact in mean only; the variance stays term-choice noise
        assert abs(res.value - want) <= 4 * res.stderr + 1e-12


@pytest.mark.parametrize("strategy", STRATS)
@pytest.mark.parametrize("coupling", [True, False])
def test_widths_give_identical_results(ou_problem, strategy, coupling):
    op, model, tr, f, _ = ou_problem
    runs = [estimate(op, model, tr, f, [1.0], EstimatorConfig(60_000, strategy, coupling, seed=9,
                                                              width=w, chunk=4096))
            for w in (1, 3, 8)]
    assert len({(r.value, r.stderr) for r in runs}) == 1
    assert runs[0].term_counts == runs[2].term_counts


def test_seed_changes_output(ou_problem):
    op, model, tr, f, _ = ou_problem
    a = estimate(op, model, tr, f, [1.0], EstimatorConfig(1000, "sample-terms", seed=1))
    b = estimate(op, model, tr, f, [1.0], EstimatorConfig(1000, "sample-terms", seed=2))
    assert a.value != b.value


def test_stream_is_counter_based():
    a = stream(5, 1, 2).standard_normal(4)
    b = stream(5, 1, 2).standard_normal(4)
    c = stream(5, 2, 1).standard_normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_unbiased_over_many_runs(ou_problem):
    op, model, tr, f, exact = ou_problem
    vals, ses = [], []
    for seed in range(50):
        r = estimate(op, model, tr, f, [1.0], EstimatorConfig(10 ** 5, "sample-terms", seed=seed))
        vals.append(r.value)
        ses.append(r.stderr)
    pooled = math.sqrt(np.mean(np.square(ses)) / len(vals))
    assert abs(np.mean(vals) - exact) < 4 * pooled


@pytest.mark.parametrize("strategy", STRATS)
def test_strategies_agree_with_oracle(ou_problem, strategy):
    op, model, tr, f, exact = ou_problem
    r = estimate(op, model, tr, f, [1.0], EstimatorConfig(400_000, strategy, seed=21))
    assert abs(r.value - exact) < 4 * r.stderr


def test_enumerate_and_sample_agree(ou_problem):
    op, model, tr, f, _ = ou_problem
    a = estimate(op, model, tr, f, [1.0], EstimatorConfig(200_000, "enumerate-all-terms", seed=4))
    b = estimate(op, model, tr, f, [1.0], EstimatorConfig(200_000, "sample-terms", seed=5))
    assert abs(a.value - b.value) < 4 * math.hypot(a.stderr, b.stderr)


def test_coupling_reduces_variance(ou_problem):
    op, model, tr, f, exact = ou_problem
    f = polynomial([0.0, 1.0])
    coupled = estimate(op, model, tr, f, [1.0], EstimatorConfig(100_000, coupling=True, seed=6))
    indep = estimate(op, model, tr, f, [1.0], EstimatorConfig(100_000, coupling=False, seed=6))
    assert coupled.stderr < indep.stderr
    assert abs(coupled.value - indep.value) < 4 * math.hypot(coupled.stderr, indep.stderr)


def test_term_statistics_reported(ou_problem):
    op, model, tr, f, _ = ou_problem
    r = estimate(op, model, tr, f, [1.0], EstimatorConfig(20_000, "sample-terms", seed=2))
    assert sum(r.term_counts) == r.replicates == 20_000
    assert r.effective_terms == len(op)
    assert r.strategy == "sample-terms" and r.wall_clock >= 0


def test_bad_config():
    with pytest.raises(EstimatorError):
        EstimatorConfig(0)
    with pytest.raises(EstimatorError):
        EstimatorConfig(10, strategy="nonsense")
    with pytest.raises(EstimatorError):
        EstimatorConfig(10, width=0)


def test_non_gaussian_innovations_fall_back_to_independent(ou_problem, caplog):
    op, model, tr, f, exact = ou_problem
    spec = InnovationSpec("truncated-gaussian", 1, radius=3.0)
    r = estimate(op, model, tr, f, [1.0], EstimatorConfig(50_000, seed=1), spec=spec)
    assert "independently" in caplog.text
    assert abs(r.value - exact) < 0.05


def _pair(n=4, slot=1):
    coarse = GridProgram.uniform(1, n)
    fine = GridProgram(((1, slot), (2, n), (1, n - slot - 1)), n)
    return SignedTerm(1, fine), SignedTerm(-1, coarse)


def test_brownian_pair_difference_vanishes():
    model, _ = brownian(1)
    plus, minus = _pair()
    fp, fm = coupled_pair_sample(plus, minus, model, euler_transition(model), polynomial([0.0, 1.0]),
                                 [0.3], np.random.default_rng(0), size=10_000)
    np.testing.assert_allclose(fp, fm, atol=1e-12)


def test_diffusion_free_pair_is_equal():
    model, _ = linear_ou(-1.0, 0.0)
    plus, minus = _pair()
    fp, fm = coupled_pair_sample(plus, minus, model, euler_transition(model), polynomial([0.0, 1.0]),
                                 [1.0], np.random.default_rng(0), size=100)
    assert np.var(fp - fm) == 0.0


def test_ou_coupled_difference_has_smaller_variance():
    model, _ = linear_ou(-1.0, 1.0)
    tr = euler_transition(model)
    f = polynomial([0.0, 1.0, 0.5])
    plus, minus = _pair()
    size = 100_000
    fp, fm = coupled_pair_sample(plus, minus, model, tr, f, [1.0], np.random.default_rng(1), size)
    gp, _ = coupled_pair_sample(plus, minus, model, tr, f, [1.0], np.random.default_rng(2), size)
    _, gm = coupled_pair_sample(plus, minus, model, tr, f, [1.0], np.random.default_rng(3), size)
    assert np.var(fp - fm) < np.var(gp - gm)
    # each side keeps its own marginal law
    for a, b in ((fp, gp), (fm, gm)):
        se = math.sqrt(a.var() / size + b.var() / size)
        assert abs(a.mean() - b.mean()) < 4 * se
        va, vb = a.var(), b.var()
        se_v = math.sqrt(np.var((a - a.mean()) ** 2) / size + np.var((b - b.mean()) ** 2) / size)
        assert abs(va - vb) < 4 * se_v


def test_unpairable_terms_rejected():
    model, _ = linear_ou(-1.0, 1.0)
    a = SignedTerm(1, GridProgram(((1, 1), (2, 4), (1, 2)), 4))
    b = SignedTerm(-1, GridProgram(((1, 2), (2, 4), (1, 1)), 4))
    with pytest.raises(EstimatorError):
        coupled_pair_sample(a, b, model, euler_transition(model), indicator(0.0), [0.0],
                            np.random.default_rng(0))
