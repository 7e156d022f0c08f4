import numpy as np
import pytest

from fedswa_sim.algorithms import AlgoConfig
from fedswa_sim.engine import RunConfig, TaskConfig
from fedswa_sim.schedules import LrSchedule
from fedswa_sim.tasks import quadratic_task


@pytest.fixture
def two_point_task():
    """m=2, d=1, A=I, one sample each at 0 and 2."""
    return quadratic_task(np.ones((2, 1, 1)), np.array([[[0.0]], [[2.0]]]))


@pytest.fixture
def small_cfg():
    return RunConfig(
        task=TaskConfig(dim=3, clients=6, samples_per_client=20, hetero_knob=1.0, noise_sigma=0.1),
        algo=AlgoConfig(name="fedmoswa"),
        sched=LrSchedule(eta_l=0.05, rho=0.1, K=5),
        rounds=10, participation=3, batch_size=4, seed=7,
    )


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
