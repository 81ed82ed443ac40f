"""Acceptance bookkeeping: tests marked ``criterion(n, title)`` are summarized one line per criterion."""

import pytest

_results: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.skipped and rep.when != "call":
        return
    if rep.when == "call" or rep.failed:
        number, title = mark.args
        entry = _results.setdefault(number, {"title": title, "ok": True, "details": []})
        entry["ok"] = entry["ok"] and rep.passed
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        entry = _results[number]
        verdict = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {entry['title']}")
        for d in entry["details"]:
            terminalreporter.write_line(f"    {d}")


@pytest.fixture()
def detail(request):
    """Attach a line of measured values to the acceptance summary."""
    def add(text: str) -> None:
        request.node.user_properties.append(("detail", text))
    return add
