import numpy as np
import pytest

from pulsesync.config import ExperimentConfig
from pulsesync.session import run_session


def short_config(duration=3.0, **sections) -> ExperimentConfig:
    """Default experiment, shortened; extra keyword blocks merge in."""
    session = {"duration_s": duration, **sections.pop("session", {})}
    return ExperimentConfig().updated(session=session, **sections)


@pytest.fixture(scope="session")
def default_session_10s():
    """A 10 s default-config session with its ideal-clock control run."""
    return run_session(short_config(10.0))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# ---------------------------------------------------------------- acceptance report

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n = mark.args[0]
    entry = _CRITERIA.setdefault(n, {"ok": True, "details": [], "tests": []})
    if rep.when == "call" or rep.failed:
        entry["tests"].append(item.name)
        entry["ok"] &= rep.passed
        entry["details"] += [v for k, v in item.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        detail = "; ".join(e["details"]) or ", ".join(e["tests"])
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if e['ok'] else 'FAIL'}  {detail}")
