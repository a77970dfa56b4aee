"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

import pytest

ACCEPTANCE_RESULTS: dict = {}


class AcceptanceRecorder:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.details: list = []

    def note(self, text: str) -> None:
        self.details.append(text)


@pytest.fixture()
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    rec = AcceptanceRecorder(number, title)
    entry = ACCEPTANCE_RESULTS.setdefault(number, {"title": title, "details": [], "outcome": None})
    rec.details = entry["details"]
    yield rec


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    entry = ACCEPTANCE_RESULTS.setdefault(number, {"title": title, "details": [], "outcome": None})
    entry["outcome"] = "PASS" if report.passed else "FAIL"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        entry = ACCEPTANCE_RESULTS[number]
        status = entry["outcome"] or "FAIL"
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"criterion {number} [{status}] {entry['title']}: {detail}")
