import numpy as np
import pytest

from weakboost.sde_model import kinetic_example


def polynomial_kinetic():
    """Kinetic model with polynomial coefficients, plus closed-form pieces for checks."""
    b = lambda x, t: 0.3 * x ** 2 - x + 0.1 * t
    db = lambda x, t: 0.6 * x - 1.0
    dtb = lambda x, t: np.full_like(x, 0.1)
    s = lambda x, t: 1.0 + 0.2 * x ** 2 + 0.1 * t * x
    ds = lambda x, t: 0.4 * x + 0.1 * t
    d2s = lambda x, t: np.full_like(x, 0.4)
    dts = lambda x, t: 0.1 * x
    model = kinetic_example(b, s, db, ds, dtb, dts, name="kinetic-poly")
    return model, dict(b=b, db=db, s=s, ds=ds, d2s=d2s, dts=dts)


@pytest.fixture
def kinetic_poly():
    return polynomial_kinetic()


@pytest.fixture
def rng():
    return np.random.default_rng(20261014)


ACCEPTANCE = {}


def record(number: int, passed: bool, detail: str):
    """Store and print one acceptance line; the summary repeats them in order."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
