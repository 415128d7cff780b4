import pytest

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def record(request):
    """``record(criterion, ok, detail)`` stores one acceptance verdict for the summary."""
    results = request.config.stash.setdefault(_ACCEPTANCE, {})

    def _record(criterion: str, ok: bool, detail: str) -> None:
        results[criterion] = (bool(ok), detail)
    return _record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(results, key=lambda k: int(k[1:])):
        ok, detail = results[name]
        terminalreporter.write_line(f"{name:<4} {'PASS' if ok else 'FAIL'}  {detail}")
