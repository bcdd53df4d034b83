"""Acceptance bookkeeping: tests marked ``criterion(n)`` roll up into one
PASS/FAIL line per criterion in the terminal summary."""

import pytest

CRITERIA = {
    1: "Jacobians match central differences",
    2: "preintegration oracle equivalence and zero-noise residuals",
    3: "marginalization matches the full solve",
    4: "initialization recovers bias, gravity and static start",
    5: "zero-noise end-to-end consistency",
    6: "drift ordering under slip and vision dropout",
    7: "drift report arithmetic",
    8: "property suites",
}

_outcomes = {}


@pytest.fixture
def measured(request):
    """Record ``name=value`` pairs shown next to the criterion line."""
    def record(**kv):
        request.node.user_properties.extend(kv.items())
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    entry = _outcomes.setdefault(marker.args[0], {"passed": 0, "failed": 0, "notes": []})
    entry["passed" if rep.passed else "failed"] += 1
    entry["notes"].extend(f"{k}={v}" for k, v in item.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        e = _outcomes[n]
        status = "PASS" if e["failed"] == 0 else "FAIL"
        line = f"criterion {n} {status}: {CRITERIA.get(n, '')} ({e['passed']}/{e['passed'] + e['failed']} checks)"
        terminalreporter.write_line(line)
        if e["notes"]:
            terminalreporter.write_line("    " + ", ".join(e["notes"]))
