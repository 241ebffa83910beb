import numpy as np
import pytest

from hawkeslab.model import Kernel, MarkDistribution, NetworkModel, ServiceDistribution


def markov_model(lambda0=1.0, r=2.0, b=1.0, mu=1.0, mode="delayed", mark=None):
    """Univariate model with h(t) = e^{-rt}, marks B (deterministic b by default), Exp(mu) services."""
    return NetworkModel.univariate(lambda0, Kernel.exponential(r, 1.0),
                                   mark or MarkDistribution.deterministic(b),
                                   ServiceDistribution.exponential(mu), mode=mode)


@pytest.fixture
def reference():
    # lambda0=1, r=2, B=1, mu=1: stationary means (2, 2)
    return markov_model()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE_LINES = []


def record(line: str):
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
