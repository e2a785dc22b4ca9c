import json
from pathlib import Path

import pytest

RESULTS_FILE = Path(__file__).resolve().parent.parent / "acceptance_results.json"


class Ledger:
    """Collects one verdict per acceptance criterion for the end-of-run summary."""

    def __init__(self):
        self.rows: dict[int, dict] = {}

    def record(self, number: int, title: str, passed: bool, detail: str, data=None):
        self.rows[number] = {"title": title, "passed": bool(passed), "detail": detail, "data": data}


_LEDGER = Ledger()


@pytest.fixture(scope="session")
def acceptance():
    return _LEDGER


def pytest_terminal_summary(terminalreporter):
    if not _LEDGER.rows:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_LEDGER.rows):
        row = _LEDGER.rows[number]
        verdict = "PASS" if row["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {number} {verdict}: {row['title']} | {row['detail']}")
    RESULTS_FILE.write_text(json.dumps({str(k): v for k, v in sorted(_LEDGER.rows.items())}, indent=2) + "\n")
