import pytest

from loadshed.casefile import load_case

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion_report(request):
    """Record one ``criterion N: PASS|FAIL ...`` line for the terminal summary."""
    lines = request.config.stash[_LINES]

    def record(number: int, ok: bool, detail: str) -> str:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        return line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def case6():
    return load_case("case6")


@pytest.fixture(scope="session")
def case118():
    try:
        return load_case("case118")
    except FileNotFoundError:
        pytest.skip("118-bus case file not available")
