import time

import pytest

RUNTIME_LIMIT_S = 300.0
_results = {}
_start = [time.perf_counter()]


def pytest_sessionstart(session):
    _start[0] = time.perf_counter()


@pytest.fixture(scope="session")
def acceptance():
    """Record one line per acceptance criterion: record(number, status, detail)."""

    def record(number, status, detail):
        _results[number] = (status, detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    elapsed = time.perf_counter() - _start[0]
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_results):
        status, detail = _results[number]
        tr.write_line(f"criterion {number:>2}: {status} - {detail}")
    status = "PASS" if elapsed < RUNTIME_LIMIT_S else "FAIL"
    tr.write_line(f"criterion 10 (suite runtime): {status} - {elapsed:.1f} s for this session "
                  f"(limit {RUNTIME_LIMIT_S:.0f} s)")
