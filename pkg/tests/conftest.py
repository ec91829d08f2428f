import numpy as np
import pytest

from xrsynth.phantom import two_ellipsoid_phantom

_acceptance = {}


def pytest_runtest_logreport(report):
    label = getattr(report, "acceptance_label", None)
    if label is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance.setdefault(label, []).append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        outcome.get_result().acceptance_label = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_acceptance, key=lambda s: int(s.split()[0][2:])):
        status = "PASS" if all(o == "passed" for o in _acceptance[label]) else "FAIL"
        terminalreporter.write_line(f"{status}  {label}")


@pytest.fixture(scope="session")
def small_phantom():
    return two_ellipsoid_phantom((64, 48, 64), seed=3, nodule=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

