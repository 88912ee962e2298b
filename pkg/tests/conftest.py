import pytest

N_CRITERIA = 10
_results = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(number, name, passed, detail)."""

    def record(number, name, passed, detail=""):
        _results[number] = (name, bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in _results:
            name, ok, detail = _results[n]
            line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}"
            terminalreporter.write_line(f"{line}: {detail}" if detail else line)
        else:
            terminalreporter.write_line(f"criterion {n:2d} NOT RUN  (deselected, or errored before reporting)")
