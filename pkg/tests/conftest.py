import pytest

from metaquant import tensor as T


@pytest.fixture(autouse=True)
def _clean_tape():
    T.get_tape().clear()
    yield
    T.get_tape().clear()


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_RESULTS

    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        status, title, detail, secs = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n} {status}: {title} ({secs:.1f} s) {detail}")
