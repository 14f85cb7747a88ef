from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import pytest

from ucvm.repo_core import Repository
from ucvm.transport import serve_in_thread

CRITERIA = {
    1: "on-demand fetch economics",
    2: "time travel digest equality",
    3: "snapshot stickiness and unpin",
    4: "union oracle equivalence",
    5: "merge rules against FHS oracle",
    6: "exhaustive account merge",
    7: "staged image update",
    8: "offline reboot from cache",
    9: "shutdown ordering and late writes",
}

_outcomes: dict[int, list[bool]] = defaultdict(list)


def pytest_runtest_logreport(report: pytest.TestReport) -> None:
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes[marker].append(report.outcome == "passed")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item: pytest.Item, call: pytest.CallInfo) -> object:
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion = mark.args[0]


def pytest_terminal_summary(terminalreporter: object) -> None:
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")  # type: ignore[attr-defined]
    for n, label in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        tr.write_line(f"criterion {n} [{label}]: {status} ({sum(results or [])}/{len(results or [])} tests)")  # type: ignore[attr-defined]


# ---------------------------------------------------------------------------
# Shared fixtures
# ---------------------------------------------------------------------------


@pytest.fixture
def repo(tmp_path: Path) -> Repository:
    return Repository.init(tmp_path / "repo", "os")


@pytest.fixture
def server(repo: Repository):  # noqa: ANN201
    with serve_in_thread(repo) as srv:
        yield srv
