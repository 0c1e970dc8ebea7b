import numpy as np
import pytest

from rbthresh import core

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def two_type():
    from rbthresh.exact import counterexample_two_type
    return counterexample_two_type(20)


def random_agent(rng, S):
    u = rng.random((2, S, S))
    return core.AgentModel(u / u.sum(axis=2, keepdims=True), rng.normal(size=S))
