import numpy as np
import pytest

from dispersekit.numeric_core import seeded_normal


@pytest.fixture
def batch_8x4():
    return seeded_normal(8, 4, 42)


def random_batch(B, d, seed, scale=None):
    H = seeded_normal(B, d, seed)
    return H / np.sqrt(d) if scale is None else H * scale


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
