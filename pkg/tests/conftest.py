import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ncvopt.families import Gaussian
from ncvopt.fit import Problem
from ncvopt.model import ModelSpec, build_design

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def spd(rng, p, shift=1.0):
    B = rng.normal(size=(p, p))
    return B.T @ B + shift * np.eye(p)


def smooth_problem(n=120, k=12, family=None, seed=0, y=None, x=None):
    rng = np.random.default_rng(seed)
    x = np.linspace(0, 1, n) if x is None else x
    if y is None:
        y = np.sin(2 * np.pi * x) + 0.3 * rng.normal(size=n)
    design = build_design(ModelSpec(([f"s(x,k={k})"],)), {"x": x})
    return Problem(design, np.asarray(y, dtype=float), family or Gaussian())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def record(number: int, ok: bool, detail: str):
    """Log one acceptance criterion outcome; printed again in the summary."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
