import pytest

# (criterion, passed, detail) lines collected by the acceptance suite
VERDICTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        VERDICTS.append((name, ok, detail))
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}: {name} -- {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in VERDICTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}: {name} -- {detail}")
