import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dtmap.trajdata import Dataset, SimConfig, Trajectory, simulate

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion; printed at session end."""

    def record(number: int, name: str, passed: bool, detail: str = ""):
        line = f"ACCEPTANCE {number} {'PASS' if passed else 'FAIL'}: {name} {detail}".rstrip()
        print(line)
        _ACCEPTANCE[number] = (name, bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        name, passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{number}. {'PASS' if passed else 'FAIL'}  {name}  {detail}".rstrip())


@pytest.fixture
def small_ds():
    ds, _ = simulate(SimConfig(m=40, map_kind="linear", noise_sd=0.5), 11)
    return ds


@pytest.fixture
def toy_ds():
    trajs = [
        Trajectory("a", [0.0, 1.0, 2.5], [1.0, 1.5, 0.2]),
        Trajectory("b", [0.5, 3.0], [0.3, -0.4]),
        Trajectory("c", [2.0], [2.0]),
        Trajectory("d", [0.1, 0.9, 1.7, 2.9], [0.0, 0.4, 0.8, 1.1]),
        Trajectory("e", [1.2, 2.2], [-1.0, -0.5]),
        Trajectory("f", [0.0, 3.0], [0.7, 0.9]),
    ]
    return Dataset(trajs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
