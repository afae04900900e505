import pytest

_ACCEPTANCE = []


@pytest.fixture
def report():
    """Record one acceptance line: report(number, passed, detail)."""
    def add(num, passed, detail=""):
        line = f"criterion {num:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
    return add


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def hunt_008():
    """Slices and canards at mu = 0.08 on the default seed grid (shared, ~20 s)."""
    from duckhunt.canard import hunt
    from duckhunt.model import SystemParams
    params = SystemParams(mu=0.08, eps=0.01)
    return (params,) + hunt(params)
