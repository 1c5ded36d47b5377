"""Shared test plumbing: the acceptance suite registers one line per check
here and a terminal hook prints them all at the end of the run, so the
pass/fail table survives pytest's output capture."""

ACCEPTANCE_LINES = []


def record_acceptance(index: int, label: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append((index, label, ok, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance summary")
    for index, label, ok, detail in sorted(ACCEPTANCE_LINES):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{index:02d}] {label}: {status} -- {detail}")
