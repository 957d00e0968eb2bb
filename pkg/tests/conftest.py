import json
from pathlib import Path

import pytest

from mortensen.harness.config import ExperimentConfig
from mortensen.harness.report import TIMING
from mortensen.harness.scenarios import run_scenario

CRITERIA: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])


class Runs:
    """Runs each (benchmark, kind) once per session under a temporary root."""

    def __init__(self, root: Path):
        self.root = root
        self.cache = {}

    def __call__(self, bench: str, kind: str, tag: str = ""):
        key = (bench, kind, tag)
        if key not in self.cache:
            out = self.root / f"{bench}-{kind}{tag}"
            report = run_scenario(ExperimentConfig.load(bench, kind=kind), out)
            timing = json.loads((out / TIMING).read_text())
            self.cache[key] = (report, out, timing)
        return self.cache[key]


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("runs"))
