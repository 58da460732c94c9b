import numpy as np
import pytest

from ctriage.taxonomy import default_taxonomy


@pytest.fixture(scope="session")
def tax():
    return default_taxonomy()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
