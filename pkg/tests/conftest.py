"""Shared test plumbing: acceptance pass/fail lines in the summary."""

ACCEPTANCE_LINES = []


def record(num: int, desc: str, ok: bool, detail: str = "") -> None:
    """Log one acceptance criterion verdict and assert it."""
    tag = "PASS" if ok else "FAIL"
    line = f"[{tag}] criterion {num}/9 {desc}"
    if detail:
        line += f" :: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
