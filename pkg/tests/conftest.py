import contextlib

import pytest

# (number, title) -> (passed, detail); filled by the acceptance tests
_CRITERIA: dict[tuple[int, str], tuple[bool, str]] = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)


@contextlib.contextmanager
def _record(number: int, title: str):
    c = _Criterion(number, title)
    try:
        yield c
    except BaseException as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        _CRITERIA[(number, title)] = (False, "; ".join(c.details + [msg]))
        raise
    _CRITERIA[(number, title)] = (True, "; ".join(c.details))


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records a pass/fail line for the summary."""
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), (ok, detail) in sorted(_CRITERIA.items()):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
