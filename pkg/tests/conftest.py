import pytest

ACCEPTANCE = {}


@pytest.fixture(scope="session")
def criterion():
    """record(k, ok, detail) stores the pass/fail line shown in the terminal summary."""
    def record(k: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[k] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
