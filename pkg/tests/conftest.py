import sys
import time
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from minilake.scenario import HEALTHY, NUMPY2, scenario_setup  # noqa: E402
from minilake.workspace import Workspace  # noqa: E402


class Ticker:
    """Deterministic clock: each read advances by one second."""

    def __init__(self, start: float = 1_700_000_000.0):
        self.t = start

    def __call__(self) -> float:
        self.t += 1.0
        return self.t


@pytest.fixture
def ticker():
    return Ticker()


def _scenario(tmp_path, variant, **kw):
    root = tmp_path / f"ws_{variant}"
    manifest = scenario_setup(root, variant, **kw)
    return Workspace(root), manifest


@pytest.fixture
def numpy2(tmp_path):
    return _scenario(tmp_path, NUMPY2)


@pytest.fixture
def healthy(tmp_path):
    return _scenario(tmp_path, HEALTHY)


@pytest.fixture
def scenario_factory(tmp_path):
    return lambda variant, **kw: _scenario(tmp_path, variant, **kw)


@pytest.fixture
def empty_ws(tmp_path):
    return Workspace.init(tmp_path / "ws")


@contextmanager
def within(seconds: float):
    """Fail the enclosing test if the block takes longer than ``seconds``."""
    t0 = time.perf_counter()
    yield
    elapsed = time.perf_counter() - t0
    assert elapsed < seconds, f"took {elapsed:.2f}s, limit {seconds}s"


# ---------------------------------------------------------------- acceptance summary

_criteria: dict[str, tuple[int, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    n, title = crit
    _criteria[report.nodeid] = (n, title, "PASS" if report.outcome == "passed" else "FAIL")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, status in sorted(_criteria.values()):
        terminalreporter.write_line(f"[{status}] criterion {n:2d}: {title}")
    passed = sum(s == "PASS" for _, _, s in _criteria.values())
    terminalreporter.write_line(f"{passed}/{len(_criteria)} criteria passed")
