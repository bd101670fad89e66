import pytest

# acceptance criterion -> (passed, detail), filled by the ``criterion`` fixture
CRITERIA: dict[int, tuple[bool, str]] = {}


class _Criterion:
    def __init__(self, number):
        self.number = number

    def report(self, passed: bool, detail: str):
        CRITERIA[self.number] = (bool(passed), detail)
        print(f"criterion {self.number}: {'PASS' if passed else 'FAIL'} | {detail}")
        return passed


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    return _Criterion(marker.args[0])


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        passed, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'} | {detail}")
