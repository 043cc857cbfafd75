"""Shared pytest hooks: one pass/fail line per acceptance criterion in the terminal summary."""

from contextlib import contextmanager

CRITERIA: dict[int, tuple[bool, str]] = {}


@contextmanager
def criterion(number: int, title: str):
    """Record the outcome of an acceptance criterion; details go in ``notes``."""
    notes: list[str] = []
    try:
        yield notes
    except BaseException:
        CRITERIA[number] = (False, f"{title}: " + "; ".join(notes))
        print(f"criterion {number:2d} FAIL  {title}: {'; '.join(notes)}", flush=True)
        raise
    CRITERIA[number] = (True, f"{title}: " + "; ".join(notes))
    print(f"criterion {number:2d} PASS  {title}: {'; '.join(notes)}", flush=True)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, text = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {text}")
