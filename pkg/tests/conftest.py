import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ram.datasets import DataMissingError, load_mnist, resolve_data_dir

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _data_dir():
    try:
        return resolve_data_dir()
    except DataMissingError:
        return None


@pytest.fixture(scope="session")
def mnist_dir():
    d = _data_dir()
    if d is None:
        pytest.skip("MNIST IDX files not available; set RAM_DATA_DIR")
    return d


@pytest.fixture(scope="session")
def mnist_test(mnist_dir):
    return load_mnist(mnist_dir, "test")


_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.outcome != "passed":
        # a setup failure or skip also decides the criterion
        _CRITERIA.setdefault(name, report.outcome)
        if report.outcome != "passed":
            _CRITERIA[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        label = name[len("test_criterion_"):]
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[_CRITERIA[name]]
        terminalreporter.write_line(f"criterion {label:<28} {status}")
