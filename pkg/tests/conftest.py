import numpy as np
import pytest

from levy_tilt import sampler


@pytest.fixture(scope="session", autouse=True)
def no_envelope_violations():
    yield
    assert sampler.envelope_violations == 0, "rejection envelope violated during the test run"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
