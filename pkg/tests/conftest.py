import pytest

_RESULTS: dict[int, tuple[bool, str, str]] = {}


@pytest.fixture
def criterion():
    """Record a numbered acceptance criterion; the outcome is printed at the end of the run."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        _RESULTS[number] = (bool(ok), title, detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        ok, title, detail = _RESULTS[number]
        line = f"{'PASS' if ok else 'FAIL'} [{number:2d}] {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
    passed = sum(ok for ok, _, _ in _RESULTS.values())
    terminalreporter.write_line(f"{passed}/{len(_RESULTS)} criteria passed")
