import numpy as np
import pytest

from tumorseg.preprocess import normalize_case
from tumorseg.volume import PhantomSpec, make_phantom

_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def phantom32():
    return make_phantom(PhantomSpec(shape=(32, 32, 32), seed=3, id="p32"))


@pytest.fixture(scope="session")
def phantom32_norm(phantom32):
    return normalize_case(phantom32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and report.when == "call":
        _ACCEPTANCE[report.nodeid.split("::")[-1]] = report.outcome
    elif "test_acceptance.py" in report.nodeid and report.when == "setup" and report.outcome != "passed":
        _ACCEPTANCE[report.nodeid.split("::")[-1]] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        outcome = _ACCEPTANCE[name]
        tag = "PASS" if outcome == "passed" else "FAIL" if outcome == "failed" else outcome.upper()
        terminalreporter.write_line(f"[{tag}] {name}")
