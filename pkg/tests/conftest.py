import sys
import time
from collections import defaultdict
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_SESSION_START = time.perf_counter()

# acceptance tests register (criterion, clause, passed, detail) here
ACCEPTANCE_LINES: list[tuple[str, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    grouped = defaultdict(list)
    for criterion, clause, ok, detail in ACCEPTANCE_LINES:
        grouped[criterion].append((clause, ok, detail))
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(grouped, key=int):
        clauses = grouped[criterion]
        status = "PASS" if all(ok for _, ok, _ in clauses) else "FAIL"
        terminalreporter.write_line(f"{status} criterion {criterion}")
        for clause, ok, detail in clauses:
            terminalreporter.write_line(f"    {'ok  ' if ok else 'FAIL'} {clause}: {detail}")
    elapsed = time.perf_counter() - _SESSION_START
    terminalreporter.write_line(f"session wall time {elapsed:.1f} s")
