import pytest

# criterion -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
