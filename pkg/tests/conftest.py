import numpy as np
import pytest

from acimlab.maps import builtin

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


@pytest.fixture(scope="session")
def doubling():
    return builtin("doubling")


@pytest.fixture(scope="session")
def markov3():
    return builtin("markov3")


@pytest.fixture(scope="session")
def sine():
    return builtin("sine", [0.05])


@pytest.fixture(scope="session")
def all_builtins():
    return [builtin("doubling"), builtin("markov3"), builtin("sine", [0.05])]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
