import pytest

from hsps.analysis import calibrate_background
from hsps.instrument import reference_config

TARGET_ONF = 0.115
SWEEP_NS = (60.0, 30.0, 15.0, 5.0)


@pytest.fixture(scope="session")
def calibrated_rate():
    """Background rate giving ONF 0.115 at 60 ns in the reference setup."""
    return calibrate_background(TARGET_ONF, 60.0, reference_config())


@pytest.fixture(scope="session")
def calibrated(calibrated_rate):
    return reference_config(background_rate_hz=calibrated_rate)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
        passed = sum(line.startswith("PASS") for line in lines)
        terminalreporter.write_line(f"{passed}/{len(lines)} criteria passed")
