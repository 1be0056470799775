import pytest

from reverbkit.dataset import build_dataset

ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Ten-item synthetic corpus shared by the harness and CLI tests."""
    out = tmp_path_factory.mktemp("small_ds")
    return build_dataset(10, 7, out)


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Call ``verdict(tag, passed, detail)``; the line is printed immediately and
    again in the terminal summary, in criterion order.
    """

    def record(tag, passed, detail):
        line = f"{tag} {'PASS' if passed else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES[tag] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for tag in sorted(ACCEPTANCE_LINES, key=lambda t: int(t[2:])):
        terminalreporter.write_line(ACCEPTANCE_LINES[tag])
