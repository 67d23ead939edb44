import numpy as np
import pytest

from npsfuzz.engine import FuzzConfig
from npsfuzz.smoothing import RetrainPolicy, TrainConfig
from npsfuzz.target import get_target, make_seeds


@pytest.fixture
def magic():
    return get_target("magic_chain")


@pytest.fixture
def ladder():
    return get_target("branch_ladder")


@pytest.fixture
def checksum():
    return get_target("checksum_guard")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_nps_config(seed=0, budget=5000, mode="nps+havoc", **kw):
    """nps config sized for tests: small network, early first training."""
    return FuzzConfig(
        seed=seed,
        budget=budget,
        mode=mode,
        retrain=RetrainPolicy(min_corpus=20, min_new_testcases=1, min_interval=500),
        train=TrainConfig(hidden=32, epochs=10, learning_rate=1e-3),
        **kw,
    )


def magic_seeds(n=30):
    return make_seeds(get_target("magic_chain"), n, 7)


_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" in report.nodeid and (report.when == "call" or report.failed):
        name = report.nodeid.split("::")[-1]
        _acceptance[name] = "PASS" if report.passed and _acceptance.get(name) != "FAIL" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance):
        terminalreporter.write_line(f"{_acceptance[name]}  {name}")
