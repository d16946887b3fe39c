import re

import pytest

_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = re.match(r"test_criterion_(\d+)", item.name)
    if not m:
        return
    n = int(m.group(1))
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = dict(item.user_properties).get("detail", "")
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        if rep.outcome == "skipped" and isinstance(rep.longrepr, tuple):
            detail = detail or rep.longrepr[2]
        _RESULTS[n] = (status, rep.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, dur, detail = _RESULTS[n]
        tr.write_line(f"criterion {n:2d}: {status}  ({dur:.1f} s)  {detail}")
