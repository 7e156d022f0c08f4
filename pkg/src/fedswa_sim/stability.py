"""Empirical uniform-stability probe.

Two runs share every random draw (cohorts, minibatch rows, initial model) and
differ in exactly one training sample. The distance between their final
models, and the largest loss difference they induce on a fixed held-out pool,
estimate how sensitive an algorithm is to a single sample. Sweeping one
factor at a time (n, m, sigma_g via the heterogeneity knob, K, T) exposes the
scaling the generalisation bounds predict.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import List, Sequence

import numpy as np

from .engine import RunConfig, run_experiment
from .schedules import LrSchedule
from .tasks import (TaskError, TaskSpec, draw_pool, lipschitz_constant, measure_sigma_g,
                    perturb_one_sample, pool_losses)

AXES = ("n", "m", "sigma_g", "K", "T")
STABILITY_COLUMNS = ("axis", "value", "trial", "gap_param", "gap_loss", "theory_bound")


class BoundError(ValueError):
    pass


# ------------------------------------------------------------ theory side


def c_tilde(K: int, T: int) -> float:
    """1 + (2 + 1/(KT))^(K-1) / T."""
    return 1.0 + (2.0 + 1.0 / (K * T)) ** (K - 1) / T


def b_tilde(beta: float, mu: float, K: int, T: int) -> float:
    """1 + (mu / ((beta + mu) K))^(K-1) / T."""
    return 1.0 + (mu / ((beta + mu) * K)) ** (K - 1) / T


def c_bar(K: int, T: int, rho: float = 0.1) -> float:
    """FedSAM's constant: c~ with the cyclical step-size sum replaced by the
    (larger) constant-rate sum at the same peak rate."""
    cyc = K * (1.0 + rho) / 2.0 + (1.0 - rho) / 2.0
    return 1.0 + (2.0 + 1.0 / (K * T)) ** (K - 1) / T * (K / cyc)


def theory_bound(alg: str, regime: str, L: float, beta: float, mu: float, sigma: float,
                 sigma_g: float, m: int, n: int, K: int, T: int, rho: float = 0.1) -> float:
    """Closed-form generalisation bound for one algorithm and regime.

    FedSWA and FedMoSWA share the constants; FedMoSWA leaves sigma_g
    un-amplified. FedSAM (non-convex only) uses ``c_bar``.
    """
    if min(L, beta, m, n, K, T) <= 0 or min(sigma, sigma_g) < 0:
        raise BoundError("bound parameters must be positive")
    lead = 2.0 * L / (m * n * beta)
    if regime == "strongly_convex":
        if mu <= 0:
            raise BoundError("strongly convex bound needs mu > 0")
        b = b_tilde(beta, mu, K, T)
        expo = math.exp(1.0 - mu / ((beta + mu) * T))
        if alg == "fedswa":
            return lead * expo * (b * L + b * sigma_g + b * sigma)
        if alg == "fedmoswa":
            return lead * expo * (b * L + sigma_g + b * sigma)
        raise BoundError(f"no strongly convex bound for {alg!r}")
    if regime == "nonconvex":
        expo = math.exp(1.0 / T + 1.0)
        if alg == "fedswa":
            c = c_tilde(K, T)
            return lead * expo * (c * L + c * sigma_g + c * sigma)
        if alg == "fedmoswa":
            c = c_tilde(K, T)
            return lead * expo * (c * L + sigma_g + c * sigma)
        if alg == "fedsam":
            c = c_bar(K, T, rho)
            return lead * expo * (c * L + c * sigma_g + c * sigma)
        raise BoundError(f"no non-convex bound for {alg!r}")
    raise BoundError(f"unknown regime {regime!r}")


# ---------------------------------------------------------- measurement


@dataclass
class TwinResult:
    gaps: np.ndarray  # ||theta_t - theta'_t||, t = 0..T
    theta: np.ndarray
    theta_twin: np.ndarray


def twin_run(cfg: RunConfig, task: TaskSpec, perturb_client_j: int, perturb_sample_id: int,
             seed: int = 0, replacement=None) -> TwinResult:
    """Train on S and on S with one sample of ``perturb_client_j`` redrawn."""
    twin = perturb_one_sample(task, perturb_client_j, perturb_sample_id, seed, replacement)
    a = run_experiment(cfg, task, keep_thetas=True, metrics=False).thetas
    b = run_experiment(cfg, twin, keep_thetas=True, metrics=False).thetas
    gaps = np.array([np.linalg.norm(x - y) for x, y in zip(a, b)])
    return TwinResult(gaps, a[-1], b[-1])


@dataclass
class StabilityReport:
    axis: str
    values: List[float]
    trials: int
    algorithm: str
    gap_param: np.ndarray  # (values, trials)
    gap_loss: np.ndarray  # (values, trials)
    theory: np.ndarray  # (values,)
    sigma_g: np.ndarray  # (values,) measured at theta* (quadratic) or theta_0
    lipschitz: np.ndarray  # (values,)
    slope: float = float("nan")

    @property
    def mean_gap(self) -> np.ndarray:
        return self.gap_param.mean(axis=1)

    def rows(self):
        for v, val in enumerate(self.values):
            for t in range(self.trials):
                yield (self.axis, val, t, float(self.gap_param[v, t]), float(self.gap_loss[v, t]),
                       float(self.theory[v]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(STABILITY_COLUMNS)
            for row in self.rows():
                w.writerow([row[0], repr(row[1]), row[2], repr(row[3]), repr(row[4]), repr(row[5])])


def loglog_slope(x, y) -> float:
    """Least-squares slope of log(y) against log(x)."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def linear_slope(x, y) -> float:
    return float(np.polyfit(np.asarray(x, float), np.asarray(y, float), 1)[0])


def axis_slope(axis: str, xs, gaps) -> float:
    """Log-log slope for size axes, plain slope against measured sigma_g."""
    if axis == "sigma_g":
        return linear_slope(xs, gaps)
    return loglog_slope(xs, gaps)


def _with_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis == "n":
        return replace(cfg, task=replace(cfg.task, samples_per_client=int(value)))
    if axis == "m":
        m = int(value)
        s = m if cfg.participation == cfg.task.clients else max(1, round(cfg.participation * m / cfg.task.clients))
        return replace(cfg, task=replace(cfg.task, clients=m), participation=s)
    if axis == "sigma_g":
        return replace(cfg, task=replace(cfg.task, hetero_knob=float(value)))
    if axis == "K":
        s = cfg.sched
        return replace(cfg, sched=LrSchedule(s.eta_l, s.rho, int(value), s.round_decay))
    if axis == "T":
        return replace(cfg, rounds=int(value))
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {AXES}")


def _effective_lipschitz(task: TaskSpec, theta0: np.ndarray) -> float:
    try:
        return lipschitz_constant(task)
    except TaskError:
        pass
    # unclipped: restrict to the ball of radius 2||theta* - theta0|| around theta0
    grad0 = task.global_loss_grad(theta0)[1]
    radius = 2.0 * float(np.linalg.norm(task.optimum - theta0)) if task.optimum is not None else 1.0
    beta = task.beta if task.beta > 0 else 1.0
    return beta * radius + float(np.linalg.norm(grad0))


def stability_sweep(base_cfg: RunConfig, axis: str, values: Sequence, trials: int = 10,
                    seed: int = 0, pool_size: int = 1000) -> StabilityReport:
    """Average twin-run gaps over ``trials`` for every value of ``axis``.

    Trial ``r`` uses the same task seed, run seed, perturbed position and
    replacement draw for every axis value (common random numbers), so the
    per-value means are directly comparable.
    """
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    values = list(values)
    if values != sorted(values):
        raise ValueError("sweep values must be sorted ascending")
    if trials < 10:
        raise ValueError("trials must be >= 10")
    gap_p = np.zeros((len(values), trials))
    gap_l = np.zeros((len(values), trials))
    theory = np.zeros(len(values))
    sig = np.zeros(len(values))
    lips = np.zeros(len(values))
    for v, val in enumerate(values):
        cfg = _with_axis(base_cfg, axis, val)
        sig_acc = 0.0
        for r in range(trials):
            ss = np.random.SeedSequence([seed, r])
            task_seed, run_seed, pool_seed, repl_seed = (int(x) for x in ss.generate_state(4))
            pick = np.random.default_rng(ss.spawn(1)[0])
            tcfg = replace(cfg, seed=run_seed, task=replace(cfg.task, seed=task_seed))
            task = tcfg.task.build()
            j = int(pick.integers(task.m))
            row = int(pick.random() * task.n)
            res = twin_run(tcfg, task, j, int(task.ids[j, row]), repl_seed)
            pool = draw_pool(task, pool_size, pool_seed)
            diff = np.abs(pool_losses(task, res.theta, pool) - pool_losses(task, res.theta_twin, pool))
            gap_p[v, r] = res.gaps[-1]
            gap_l[v, r] = float(diff.max())
            ref = task.optimum if task.optimum is not None else task.initial_theta()
            sig_acc += measure_sigma_g(task, ref)
            if r == 0:
                lips[v] = _effective_lipschitz(task, task.initial_theta())
                mu, beta = float(task.mu or 0.0), float(task.beta or 1.0)
        sig[v] = sig_acc / trials
        algo = base_cfg.algo.name if base_cfg.algo.name in ("fedswa", "fedmoswa") else "fedswa"
        t0 = cfg.task
        # the clipped loss is only strongly convex near the optimum
        convex = t0.kind == "quadratic" and t0.clip <= 0 and mu > 0
        regime = "strongly_convex" if convex else "nonconvex"
        theory[v] = theory_bound(algo, regime, lips[v], beta, mu, t0.noise_sigma, sig[v],
                                 t0.clients, t0.samples_per_client, cfg.sched.K, max(cfg.rounds, 1),
                                 cfg.sched.rho)
    report = StabilityReport(axis, values, trials, base_cfg.algo.name, gap_p, gap_l, theory, sig, lips)
    xs = sig if axis == "sigma_g" else values
    report.slope = axis_slope(axis, xs, report.mean_gap)
    return report
