import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

# property tests draw the same examples on every run
settings.register_profile("deterministic", derandomize=True)
settings.load_profile("deterministic")

# (number, title) -> failed?, filled in for tests marked with @pytest.mark.criterion
_criteria: dict[tuple[int, str], bool] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    report = outcome.get_result()
    key = tuple(mark.args)
    if report.when == "call" or report.failed:
        _criteria[key] = _criteria.get(key, False) or report.failed


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), failed in sorted(_criteria.items()):
        terminalreporter.write_line(f"criterion {number}: {'FAIL' if failed else 'PASS'}  {title}")
