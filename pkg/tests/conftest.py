from __future__ import annotations

import sys
from pathlib import Path

import pytest

REPO_ROOT = Path(__file__).resolve().parent.parent
FIXTURES_DIR = REPO_ROOT / "fixtures"

sys.path.insert(0, str(Path(__file__).resolve().parent))


@pytest.fixture()
def fixtures_dir() -> Path:
    return FIXTURES_DIR


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    rows = []
    for status, verdict in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for report in terminalreporter.stats.get(status, []):
            if "test_acceptance" in report.nodeid and report.when == "call":
                rows.append((report.nodeid.split("::")[-1], verdict))
    if rows:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name, verdict in sorted(rows):
            terminalreporter.write_line(f"{verdict}  {name}")
