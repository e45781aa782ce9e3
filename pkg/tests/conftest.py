"""Prints one ACCEPTANCE line per numbered criterion after the run."""

from __future__ import annotations

import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)\b")
_verdicts: dict[int, bool] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if m is None:
        return
    n = int(m.group(1))
    if report.when == "call":
        _verdicts[n] = report.passed and _verdicts.get(n, True)
    elif report.failed or report.skipped:
        # setup or teardown trouble counts as unverified
        _verdicts[n] = False


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.ensure_newline()
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        verdict = "PASS" if _verdicts[n] else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {n} {verdict}")
