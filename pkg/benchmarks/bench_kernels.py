"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Part 1 times each loss kernel in-process (jit vs numpy). Part 2 runs the same
short simulation in two subprocesses, one per value of FEDSWA_SIM_NUMBA.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fedswa_sim import kernels
from fedswa_sim.tasks import make_logreg, make_mlp, make_quadratic

END_TO_END = """
import time
from fedswa_sim.engine import RunConfig, TaskConfig, run_experiment
from fedswa_sim.algorithms import AlgoConfig
from fedswa_sim.schedules import LrSchedule
from fedswa_sim._accel import backend
cfg = RunConfig(task=TaskConfig(kind="{kind}", dim=10, clients=20, samples_per_client=100),
                algo=AlgoConfig(name="fedmoswa"), sched=LrSchedule(eta_l=0.05, K=10),
                rounds=1, participation=10, batch_size=10)
run_experiment(cfg)  # warm-up / compile
cfg = RunConfig(task=cfg.task, algo=cfg.algo, sched=cfg.sched, rounds=100,
                participation=10, batch_size=10)
t = time.perf_counter()
run_experiment(cfg, metrics=False)
print(backend(), time.perf_counter() - t)
"""


def kernel_cases():
    q = make_quadratic(20, 2, 200, noise_sigma=0.1, clip=1.0)
    lr = make_logreg(20, 2, 200)
    mlp = make_mlp(20, 2, 200, classes=4, hidden=32)
    idx = np.arange(50, dtype=np.int64)
    yield "quad", (q.A[0], q.X[0], idx, np.zeros(q.dim), q.clip)
    yield "logreg", (lr.X[0], lr.y[0], idx, np.zeros(lr.dim), lr.reg)
    yield "mlp", (mlp.X[0], mlp.y[0], idx, mlp.initial_theta(), mlp.hidden, mlp.classes)
    v = np.random.default_rng(0).normal(size=(16, 500))
    yield "mean_rows", (v,)
    yield "dot", (v[0], v[1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=2000)
    args = ap.parse_args()
    if not kernels.JIT_IMPLS:
        print("numba disabled in this process; kernel comparison needs FEDSWA_SIM_NUMBA unset")
    else:
        print(f"{'kernel':<10} {'numba us':>10} {'numpy us':>10} {'speedup':>8}")
        for name, args_ in kernel_cases():
            jit_fn, np_fn = kernels.JIT_IMPLS[name], kernels.NUMPY_IMPLS[name]
            jit_fn(*args_)
            t_jit = min(timeit.repeat(lambda: jit_fn(*args_), number=args.repeat, repeat=3)) / args.repeat
            t_np = min(timeit.repeat(lambda: np_fn(*args_), number=args.repeat, repeat=3)) / args.repeat
            print(f"{name:<10} {t_jit * 1e6:10.2f} {t_np * 1e6:10.2f} {t_np / t_jit:8.2f}")
    print("\nend to end, 100 rounds of fedmoswa:")
    for kind in ("quadratic", "mlp"):
        for flag in ("1", "0"):
            env = dict(os.environ, FEDSWA_SIM_NUMBA=flag)
            out = subprocess.run([sys.executable, "-c", END_TO_END.format(kind=kind)], env=env,
                                 capture_output=True, text=True, check=True).stdout.split()
            print(f"  {kind:<10} {out[0]:<6} {float(out[1]):.3f}s")


if __name__ == "__main__":
    main()
