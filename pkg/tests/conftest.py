import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, keyed by the ``criterion`` property.

    A ``seconds`` property overrides the call duration when the work runs in a fixture.
    """
    lines = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" not in props or (status == "passed" and rep.when != "call"):
                continue
            seconds = props.get("seconds", rep.duration)
            lines.append((props["criterion"], "PASS" if status == "passed" else "FAIL", seconds))
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for label, verdict, duration in sorted(lines):
        terminalreporter.write_line(f"{verdict}  criterion {label}  ({duration:.1f} s)")
