import os
import subprocess
import sys

import numpy as np

from fedswa_sim import _accel, kernels

SCRIPT = """
from fedswa_sim.engine import RunConfig, TaskConfig, run_experiment
from fedswa_sim.algorithms import AlgoConfig
from fedswa_sim._accel import backend
import sys
rows = []
for kind in ("quadratic", "logreg", "mlp"):
    cfg = RunConfig(task=TaskConfig(kind=kind, dim=4, clients=5, samples_per_client=20, clip=0.8),
                    algo=AlgoConfig(name="fedmoswa"), rounds=5, participation=3, batch_size=4)
    rows += [r["train_loss"] for r in run_experiment(cfg).records]
print(backend(), *map(repr, rows))
"""


def run_with(flag):
    env = dict(os.environ, FEDSWA_SIM_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True,
                         check=True).stdout.split()
    return out[0], np.array([float(v) for v in out[1:]])


def test_env_flag_selects_backend_and_results_agree():
    name_off, off = run_with("0")
    name_on, on = run_with("1")
    assert name_off == "numpy"
    assert name_on == ("numba" if _accel.NUMBA_ENABLED else "numpy")
    np.testing.assert_allclose(on, off, rtol=1e-9)


def test_active_kernels_match_backend():
    expected = kernels.JIT_IMPLS if _accel.NUMBA_ENABLED else kernels.NUMPY_IMPLS
    assert kernels.quad_loss_grad is expected["quad"]
    assert _accel.backend() in ("numba", "numpy")
