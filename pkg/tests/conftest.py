import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# acceptance criterion id -> (description, outcome)
ACCEPTANCE_RESULTS: dict[str, tuple[str, str]] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    cid, desc = marker.args
    if call.excinfo is None:
        outcome = "PASS"
    elif call.excinfo.errisinstance(pytest.skip.Exception):
        outcome = "SKIP"
    else:
        outcome = "FAIL"
    ACCEPTANCE_RESULTS[cid] = (desc, outcome)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, description): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE_RESULTS, key=lambda c: int(c)):
        desc, outcome = ACCEPTANCE_RESULTS[cid]
        terminalreporter.write_line(f"{outcome:4s}  criterion {cid}: {desc}")
