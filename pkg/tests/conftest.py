import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion."""
    outcome = {}
    for status in ("passed", "failed", "skipped", "error"):
        for rep in terminalreporter.stats.get(status, []):
            m = _CRITERION.search(getattr(rep, "nodeid", ""))
            if not m:
                continue
            key = (int(m.group(1)), m.group(2))
            # a failure in any phase wins over a pass in another
            if outcome.get(key) != "FAIL":
                outcome[key] = {"passed": "PASS", "skipped": "SKIP"}.get(status, "FAIL")
    if not outcome:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), res in sorted(outcome.items()):
        terminalreporter.write_line(f"criterion {num} ({name.replace('_', ' ')}): {res}")
