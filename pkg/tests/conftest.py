"""Shared fixtures: the desk-scale experiment is trained once per session."""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from ptlane.cli import main
from ptlane.config import default_config
from ptlane.training import read_report

_CRITERIA: dict[int, list[str]] = {}


@dataclass
class ExperimentRun:
    root: Path
    data: Path
    summary: dict
    seconds: float

    def run(self, name) -> Path:
        return self.root / "out" / name

    def report(self, name) -> dict:
        return read_report(self.run(name) / "report.txt")


def _experiment(root: Path) -> ExperimentRun:
    cfg = default_config()
    cfg_path = root / "experiment.ini"
    cfg_path.write_text(cfg.to_ini())
    start = time.perf_counter()
    code = main(["experiment", "-c", str(cfg_path), "--data", str(root / "data"),
                 "--run-dir", str(root / "out")])
    assert code == 0, "experiment command failed"
    return ExperimentRun(root, root / "data", read_report(root / "out" / "summary.txt"),
                         time.perf_counter() - start)


@pytest.fixture(scope="session")
def experiment(tmp_path_factory) -> ExperimentRun:
    return _experiment(tmp_path_factory.mktemp("experiment"))


@pytest.fixture(scope="session")
def experiment_rerun(tmp_path_factory, experiment) -> ExperimentRun:
    return _experiment(tmp_path_factory.mktemp("experiment_rerun"))


# ------------------------------------------------------------------ criterion summary


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _CRITERIA.setdefault(mark.args[0], []).append(
            "passed" if rep.passed else ("skipped" if rep.skipped else "failed"))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        results = _CRITERIA[n]
        status = "PASS" if all(r == "passed" for r in results) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status} ({len(results)} checks)")
