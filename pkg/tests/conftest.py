import pytest


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def verdict(request, capsys):
    """Record one PASS/FAIL line for an acceptance criterion and print it."""

    def record(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config._acceptance[n] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
