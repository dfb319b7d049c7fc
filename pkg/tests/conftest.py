import os

import pytest

# criterion number -> (passed, message); filled by tests/test_acceptance.py
CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running experiment tests")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, msg = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {msg}")


@pytest.fixture(autouse=True)
def _no_output_override(monkeypatch):
    if "OFFBRL_OUTPUT_DIR" in os.environ:
        monkeypatch.delenv("OFFBRL_OUTPUT_DIR")
