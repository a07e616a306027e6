import pytest

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    table = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number, title, ok, detail=""):
        table[number] = (title, bool(ok), detail)
        print(_line(number, title, ok, detail))
        assert ok, f"criterion {number} failed: {detail}"

    return record


def _line(number, title, ok, detail):
    status = "PASS" if ok else "FAIL"
    return f"AC{number:<2} {status}  {title}" + (f"  [{detail}]" if detail else "")


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(_ACCEPTANCE, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(table):
        terminalreporter.write_line(_line(number, *table[number]))
