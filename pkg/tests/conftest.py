"""Shared fixtures. Acceptance verdicts are collected and repeated at the end of the run."""

import pytest

VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture()
def verdict(request):
    """``verdict(n, ok, detail, known_limit=None)``: print one PASS/FAIL line and fail the test on FAIL.

    A criterion that cannot be met on this hardware is reported as FAIL and
    marked xfail with ``known_limit`` as the reason, so it stays visible
    without breaking the rest of the suite.
    """

    def record(number, ok, detail, known_limit=None):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(line)
        request.config.stash[VERDICTS].append((number, line))
        if not ok:
            if known_limit:
                pytest.xfail(known_limit)
            pytest.fail(line)

    return record
