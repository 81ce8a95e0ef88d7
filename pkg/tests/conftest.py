"""Shared test plumbing: the acceptance-criteria result banner."""

import pytest

ACCEPTANCE_RESULTS = []


def record_acceptance(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS.append((criterion, ok, detail))


@pytest.hookimpl
def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {criterion:2d}: {detail}")
