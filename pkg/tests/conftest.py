import numpy as np
import pytest

from staterect.core import rng_stream


@pytest.fixture
def rng():
    return rng_stream(1234, 99)


def random_unit(rng, *shape):
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# one line per acceptance criterion, shown in the terminal summary even when
# output capture hides the individual prints
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
