import numpy as np
import pytest
from hypothesis import settings

from wcps.control import place_poles, scale_poles
from wcps.model import CartPoleParams, discretize, linearize_cartpole

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

DESIGN_POLES = (0.8, 0.85, 0.9, 0.9)
DESIGN_T = 0.04


@pytest.fixture(scope="session")
def cartpole():
    return linearize_cartpole(CartPoleParams())


def cartpole_loop(T_U, sys=None):
    """``(A, B, F)`` of the cart-pole at ``T_U`` with the rescaled design poles."""
    sys = sys or linearize_cartpole(CartPoleParams())
    A, B = discretize(sys, T_U)
    F = place_poles(A, B, scale_poles(DESIGN_POLES, DESIGN_T, T_U))
    return A, B, F


def random_stable_psd(rng, n, scale=1.0):
    M = rng.standard_normal((n, n))
    return scale * (M @ M.T) / n


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_RESULTS = []


def record_criterion(name, ok, detail):
    ACCEPTANCE_RESULTS.append((name, bool(ok), detail))
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
