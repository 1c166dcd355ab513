import time
from contextlib import contextmanager

import pytest

_RESULTS: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    """Context manager recording one PASS/FAIL line per acceptance criterion."""

    @contextmanager
    def record(number: int, title: str):
        notes: dict[str, object] = {}
        start = time.perf_counter()
        try:
            yield notes
        except BaseException:
            _RESULTS.append(_line("FAIL", number, title, notes, time.perf_counter() - start))
            raise
        _RESULTS.append(_line("PASS", number, title, notes, time.perf_counter() - start))

    return record


def _line(status, number, title, notes, seconds):
    detail = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in notes.items())
    return f"{status} criterion {number}: {title} [{seconds:.1f}s{'; ' + detail if detail else ''}]"


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
