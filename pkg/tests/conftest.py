import sys

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# The long sweeps are shared between the acceptance tests and the slow
# invariant tests so that each runs once per session.
@pytest.fixture(scope="session")
def criterion_4_result():
    from imavae import acceptance

    return acceptance.criterion_4()


@pytest.fixture(scope="session")
def criterion_5_result():
    from imavae import acceptance

    return acceptance.criterion_5()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
