import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from weakboost import sde_model as sm


def test_brownian_fields_and_law():
    model, law = sm.brownian(1)
    x = np.array([0.7])
    assert np.all(model.drift(x, 0.3) == 0)
    assert np.all(model.diffusion[0](x, 0.3) == 1)
    mean, cov = law.mean_cov([0.7], 2.5)
    assert mean[0] == 0.7 and cov[0, 0] == 2.5


def test_linear_ou_closed_form():
    _, law = sm.linear_ou(-1.0, 1.0)
    for T in (0.1, 1.0, 3.0):
        mean, cov = law.mean_cov([1.3], T)
        assert mean[0] == pytest.approx(1.3 * math.exp(-T), rel=1e-14)
        assert cov[0, 0] == pytest.approx((1 - math.exp(-2 * T)) / 2, rel=1e-14)


def test_linear_ou_zero_rate_is_brownian_scaled():
    _, law = sm.linear_ou(0.0, 2.0)
    mean, cov = law.mean_cov([0.5], 3.0)
    assert mean[0] == 0.5 and cov[0, 0] == pytest.approx(12.0)


def test_affine_gaussian_law_matches_ou():
    moments = sm.affine_gaussian_law([[-0.7]], [0.0], [[0.4]])
    _, law = sm.linear_ou(-0.7, 0.4)
    m1, c1 = moments(np.array([0.9]), 1.7)
    m2, c2 = law.mean_cov([0.9], 1.7)
    np.testing.assert_allclose(m1, m2, rtol=1e-12)
    np.testing.assert_allclose(c1, c2, rtol=1e-10)


def test_kinetic_fields(kinetic_poly):
    model, c = kinetic_poly
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, t = rng.normal(size=2), rng.random()
        np.testing.assert_allclose(model.drift(x, t), [c["b"](x[0], t), x[0]])
        np.testing.assert_allclose(model.diffusion[0](x, t), [c["s"](x[0], t), 0.0])


@pytest.mark.parametrize("name,params", [
    ("brownian", (2,)), ("linear-ou", (-1.0, 0.5)), ("geometric", (0.1, 0.3)),
    ("kinetic-example", (0.1, -1.0, 1.0, 0.2)), ("degenerate", ()),
])
def test_builtin_jacobians_agree_with_finite_differences(name, params):
    model, _ = sm.builtin_model(name, params)
    rng = np.random.default_rng(1)
    pts = rng.uniform(-2, 2, size=(100, model.dimension))
    assert sm.check_jacobians(model, pts, rng.random(100), rtol=1e-5) <= 1e-5


def test_polynomial_kinetic_jacobians(kinetic_poly):
    model, _ = kinetic_poly
    rng = np.random.default_rng(2)
    sm.check_jacobians(model, rng.uniform(-2, 2, (100, 2)), rng.random(100))


def test_wrong_jacobian_is_reported():
    model, _ = sm.linear_ou(-1.0, 1.0)
    from dataclasses import replace
    bad = replace(model, drift_jacobian=lambda x, t: np.full((1, 1), 3.0))
    with pytest.raises(sm.ModelError):
        sm.check_jacobians(bad, [[0.1]], [0.0])


def test_builtin_rejects_bad_parameters():
    with pytest.raises(sm.ModelError):
        sm.builtin_model("linear-ou", (1.0,))
    with pytest.raises(sm.ModelError):
        sm.builtin_model("linear-ou", (float("nan"), 1.0))
    with pytest.raises(sm.ModelError):
        sm.builtin_model("no-such-model")


def test_indicator_and_polynomial_evaluation():
    f = sm.indicator(0.5, (1.0, -1.0))
    np.testing.assert_array_equal(f(np.array([[1.0, 0.6], [1.0, 0.4]])), [1.0, 0.0])
    p = sm.polynomial([1.0, 0.0, 2.0])
    np.testing.assert_allclose(p(np.array([[3.0]])), [19.0])
    assert p.degree == 2 and f.bound == 1.0 and sm.constant(1.0).id == "one"


def _double_factorial(m):
    return math.prod(range(m, 0, -2))


@settings(max_examples=40, deadline=None)
@given(mu=st.floats(-2, 2), s=st.floats(0.05, 2), k=st.integers(0, 8))
def test_gaussian_moment_matches_binomial(mu, s, k):
    f = sm.polynomial({(k,): 1.0})
    got = sm.gaussian_expectation(f, [mu], [[s * s]])
    # E[(mu + s Z)^k] with E[Z^j] = (j-1)!! for even j
    want = math.fsum(math.comb(k, j) * mu ** (k - j) * s ** j * _double_factorial(j - 1)
                     for j in range(0, k + 1, 2))
    assert got == pytest.approx(want, rel=1e-9, abs=1e-12)


def test_gaussian_cross_moment():
    cov = np.array([[1.0, 0.3], [0.3, 2.0]])
    f = sm.polynomial({(1, 1): 1.0, (2, 2): 1.0}, 2)
    # E[XY] = 0.3 ; E[X^2 Y^2] = 1*2 + 2*0.09
    assert sm.gaussian_expectation(f, [0, 0], cov) == pytest.approx(0.3 + 2.18, rel=1e-12)


def test_gaussian_indicator_is_normal_cdf():
    f = sm.indicator(0.4, (1.0, 2.0))
    cov = np.array([[1.0, 0.2], [0.2, 0.5]])
    mean = np.array([0.1, -0.3])
    a = np.array([1.0, 2.0])
    want = stats.norm.cdf((0.4 - a @ mean) / math.sqrt(a @ cov @ a))
    assert sm.gaussian_expectation(f, mean, cov) == pytest.approx(want, abs=1e-15)


def test_lognormal_indicator_matches_scipy():
    _, law = sm.geometric(0.2, 0.4)
    x0, T, K = 1.5, 2.0, 1.8
    dist = stats.lognorm(s=0.4 * math.sqrt(T), scale=x0 * math.exp((0.2 - 0.08) * T))
    assert law.expectation(sm.indicator(K), [x0], T) == pytest.approx(dist.cdf(K), abs=1e-14)
    assert law.expectation(sm.indicator(-K, (-1.0,)), [x0], T) == pytest.approx(dist.sf(K), abs=1e-14)


@pytest.mark.parametrize("name,params,x0", [
    ("linear-ou", (-1.0, 0.5), (0.8,)),
    ("geometric", (0.1, 0.3), (1.2,)),
    ("kinetic-example", (0.2, -0.5, 0.7, 0.0), (0.3, -0.1)),
])
def test_reference_expectation_matches_exact_sampling(name, params, x0):
    model, law = sm.builtin_model(name, params)
    d = model.dimension
    f = sm.polynomial({(2,) + (0,) * (d - 1): 1.0, (1,) + (0,) * (d - 1): -0.5}, d)
    draws = f(law.sample(x0, 1.0, 10 ** 6, np.random.default_rng(3)))
    se = draws.std(ddof=1) / math.sqrt(draws.size)
    assert abs(draws.mean() - law.expectation(f, x0, 1.0)) < 4 * se


def test_kinetic_without_closed_form_has_no_reference():
    model, law = sm.builtin_model("kinetic-example", (0.1, -1.0, 1.0, 0.2))
    assert law.kind == "none" and model.affine is None
    with pytest.raises(sm.ModelError):
        law.expectation(sm.constant(), [0, 0], 1.0)
