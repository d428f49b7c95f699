import pytest

ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for an acceptance test; missing records count as failures."""
    rec = {}

    def record(ok, detail):
        rec["ok"], rec["detail"] = bool(ok), detail
        return bool(ok)

    yield record
    ACCEPTANCE.append((request.node.name, rec.get("ok", False), rec.get("detail", "did not complete")))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
