import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# Acceptance-criterion outcomes collected by tests/test_acceptance.py and
# printed one line per criterion at the end of the run.
ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, name: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS[number] = (name, passed, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        name, passed, detail = ACCEPTANCE_RESULTS[number]
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] criterion {number:2d} - {name}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
