"""Collects acceptance verdicts and prints one line per criterion at the end of the run."""

import pytest

_VERDICTS: dict[int, tuple[bool, str]] = {}
_EXPECTED: set[int] = set()


@pytest.fixture
def verdict(request):
    criterion = request.node.get_closest_marker("criterion").args[0]

    def record(ok: bool, detail: str = "") -> bool:
        _VERDICTS[criterion] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_collection_finish(session):
    for item in session.items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            _EXPECTED.add(marker.args[0])


def pytest_terminal_summary(terminalreporter):
    if not _EXPECTED:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_EXPECTED):
        ok, detail = _VERDICTS.get(criterion, (False, "did not complete"))
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
