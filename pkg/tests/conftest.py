import os

from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


import pytest

_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record the one-line verdict of an acceptance criterion."""
    def record(number: int, passed: bool, detail: str):
        line = f"ACCEPTANCE {number} {'PASS' if passed else 'FAIL'}: {detail}"
        _ACCEPTANCE[number] = line
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
