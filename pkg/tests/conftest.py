import re

import pytest

_CRITERIA: dict[int, dict] = {}
_NAME = re.compile(r"test_criterion_(\d+)_(\w+)")


@pytest.fixture
def report(request):
    """Attach a one-line measurement to the current acceptance criterion."""
    m = _NAME.search(request.node.name)

    def note(text: str) -> None:
        if m:
            _CRITERIA.setdefault(int(m.group(1)), {})["detail"] = text

    return note


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m:
        return
    entry = _CRITERIA.setdefault(int(m.group(1)), {})
    entry["title"] = m.group(2).replace("_", " ")
    if report.when == "call" or report.failed or report.skipped:
        if report.skipped:
            entry["outcome"] = "SKIP"
        elif report.failed:
            entry["outcome"] = "FAIL"
        elif entry.get("outcome") != "FAIL":
            entry["outcome"] = "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        e = _CRITERIA[k]
        line = f"criterion {k:2d}  {e.get('outcome', 'NOT RUN'):<5}  {e.get('title', '')}"
        if e.get("detail"):
            line += f"  [{e['detail']}]"
        terminalreporter.write_line(line)
