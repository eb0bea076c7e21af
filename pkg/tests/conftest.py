import pytest

# criterion id -> (passed, detail), filled by test_acceptance.py
_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; returns ``ok`` so the test can assert on it."""

    def record(ac_id: str, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[ac_id] = (bool(ok), detail)
        print(f"{ac_id} {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for ac_id in sorted(_ACCEPTANCE, key=lambda s: int(s.split("-")[1])):
        ok, detail = _ACCEPTANCE[ac_id]
        terminalreporter.write_line(f"{ac_id} {'PASS' if ok else 'FAIL'}  {detail}")
