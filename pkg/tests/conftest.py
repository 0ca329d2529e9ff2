import pytest

from fogstream.feedgen import generate_clean_feed
from helpers import small_schedule


@pytest.fixture
def schedule():
    return small_schedule()


@pytest.fixture
def clean_feed(schedule):
    return generate_clean_feed(schedule)


def pytest_terminal_summary(terminalreporter):
    # One line per acceptance criterion, recorded by tests/test_acceptance.py.
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
