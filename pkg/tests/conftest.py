"""Collects acceptance verdicts and prints them at the end of the session."""

ACCEPTANCE_LINES: list[str] = []


def record_verdict(number: int, ok: bool, title: str, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)
