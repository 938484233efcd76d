import pytest
from hypothesis import settings

# fixed example generation keeps reruns reproducible
settings.register_profile("default", deadline=None, derandomize=True, print_blob=True)
settings.load_profile("default")

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    """Record one summary line per acceptance criterion: ``log(number, passed, text)``."""
    lines = pytestconfig.stash[ACCEPTANCE]

    def log(number: int, passed: bool, text: str):
        lines[number] = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {text}"
        print(lines[number])

    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])
