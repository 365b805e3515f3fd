"""Shared pytest wiring: a one-line verdict per acceptance criterion.

Acceptance tests are named test_criterion_NN_<slug>; after the run, the
terminal summary prints one CRITERION line for each, pass or fail, so the
acceptance record survives output capturing.
"""

import re

_CRITERION_RESULTS: dict[str, str] = {}
_PATTERN = re.compile(r"test_criterion_(\d+)_([a-z0-9_]+)")


def pytest_runtest_logreport(report):
    m = _PATTERN.search(report.nodeid)
    if not m:
        return
    key = f"{int(m.group(1)):02d} {m.group(2).replace('_', ' ')}"
    if report.when == "call":
        _CRITERION_RESULTS[key] = "PASS" if report.passed else "FAIL"
    elif report.when == "setup" and (report.failed or report.skipped):
        _CRITERION_RESULTS[key] = "FAIL (setup)" if report.failed else "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERION_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(_CRITERION_RESULTS):
        verdict = _CRITERION_RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {verdict}")
