"""Round loop: client sampling, local work, aggregation and per-round metrics.

Randomness is keyed, never sequential: the cohort of round ``t`` comes from a
Philox stream seeded by ``(seed, t)`` and client ``i``'s minibatches from one
seeded by ``(seed, t, i)``. Client work may therefore run on any number of
threads, and reductions always happen serially in ascending client order, so
a run is bit-identical for every thread count.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import algorithms as alg
from .algorithms import AlgoConfig, LocalResult, ServerState
from .numkit import all_finite
from .schedules import LrSchedule, round_base_lr, round_lrs
from .tasks import TaskSpec, make_task, measure_sigma_g

log = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "train_loss", "dist_to_opt", "grad_norm", "client_drift",
               "control_lag", "sigma_g", "wall_ms")

_SERVER_STREAM = 0
_CLIENT_STREAM = 1


class DivergenceError(RuntimeError):
    """A model coordinate became NaN/Inf; carries the metrics gathered so far."""

    def __init__(self, msg, diagnostics=None, metrics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}
        self.metrics = metrics


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "quadratic"
    dim: int = 5
    clients: int = 20
    samples_per_client: int = 50
    hetero_knob: float = 1.0
    noise_sigma: float = 0.1
    concentration: float = 0.3
    classes: int = 4
    hidden: int = 16
    clip: float = 0.0
    seed: int = 0

    def build(self) -> TaskSpec:
        if self.kind == "quadratic":
            return make_task("quadratic", dim=self.dim, m=self.clients, n=self.samples_per_client,
                             hetero_knob=self.hetero_knob, noise_sigma=self.noise_sigma,
                             seed=self.seed, clip=self.clip)
        if self.kind == "logreg":
            return make_task("logreg", features=self.dim, m=self.clients,
                             n=self.samples_per_client, concentration=self.concentration,
                             seed=self.seed)
        return make_task("mlp", features=self.dim, m=self.clients, n=self.samples_per_client,
                         classes=self.classes, hidden=self.hidden,
                         concentration=self.concentration, seed=self.seed)


@dataclass(frozen=True)
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    algo: AlgoConfig = field(default_factory=AlgoConfig)
    sched: LrSchedule = field(default_factory=LrSchedule)
    rounds: int = 100
    participation: int = 5
    batch_size: int = 10  # 0 = full shard (exact gradients)
    seed: int = 0
    diagnostics: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if not 1 <= self.participation <= self.task.clients:
            raise ValueError(f"participation must lie in [1, {self.task.clients}]")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunMetrics:
    records: List[dict] = field(default_factory=list)
    thetas: Optional[List[np.ndarray]] = None
    final_server: Optional[ServerState] = None

    def to_csv(self, include_wall=True) -> str:
        buf = io.StringIO()
        cols = CSV_COLUMNS if include_wall else CSV_COLUMNS[:-1]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for rec in self.records:
            w.writerow([_fmt(rec[c]) for c in cols])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def to_json(self, cfg: Optional[RunConfig] = None) -> str:
        doc = {"config": cfg.to_dict() if cfg else None,
               "records": [{k: (None if v is None else v) for k, v in r.items()} for r in self.records]}
        return json.dumps(doc, indent=1)

    def final(self) -> dict:
        return dict(self.records[-1]) if self.records else {}


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------- streams


def _philox(*key) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def sample_clients(seed: int, t: int, m: int, s: int) -> np.ndarray:
    """Uniform cohort of ``s`` of ``m`` clients for round ``t``, ascending."""
    if s == m:
        return np.arange(m)
    return np.sort(_philox(seed, _SERVER_STREAM, t).choice(m, size=s, replace=False))


def client_rng(seed: int, t: int, i: int) -> np.random.Generator:
    return _philox(seed, _CLIENT_STREAM, t, i)


# ------------------------------------------------------------ diagnostics


def measure_client_drift(results: List[LocalResult], theta_prev: np.ndarray) -> Optional[float]:
    """Mean over clients and local steps k=1..K of ||theta_{i,k} - theta_prev||^2.

    ``None`` when trajectories were not retained.
    """
    if not results or any(r.trajectory is None for r in results):
        return None
    tot = 0.0
    count = 0
    for r in results:
        for th in r.trajectory[1:]:
            diff = th - theta_prev
            tot += float(diff @ diff)
            count += 1
    return tot / count


def measure_control_lag(ctrls: List[np.ndarray], task: TaskSpec,
                        theta_star: Optional[np.ndarray]) -> Optional[float]:
    """Mean over clients of ||c_j - grad F_j(theta*)||^2; ``None`` if theta* is unknown."""
    if theta_star is None:
        return None
    tot = 0.0
    for j, c in enumerate(ctrls):
        diff = c - task.full_loss_grad(j, theta_star)[1]
        tot += float(diff @ diff)
    return tot / len(ctrls)


def _record(t, task, theta, cfg, clients, drift, wall_ms, sigma=True) -> dict:
    loss, grad = task.global_loss_grad(theta)
    rec = {
        "round": t,
        "train_loss": float(loss),
        "dist_to_opt": None if task.optimum is None else float(np.linalg.norm(theta - task.optimum)),
        "grad_norm": float(np.linalg.norm(grad)),
        "client_drift": drift,
        "control_lag": None,
        "sigma_g": measure_sigma_g(task, theta) if sigma else None,
        "wall_ms": wall_ms,
    }
    if cfg.algo.name in alg.WITH_CONTROL:
        rec["control_lag"] = measure_control_lag([c.ctrl for c in clients], task, task.optimum)
    return rec


# ------------------------------------------------------------------- loop


class Simulation:
    """Holds the mutable state of one run; ``step()`` executes one round."""

    def __init__(self, cfg: RunConfig, task: Optional[TaskSpec] = None, metrics=True):
        self.cfg = cfg
        self.task = task if task is not None else cfg.task.build()
        if cfg.participation > self.task.m:
            raise ValueError("participation exceeds the number of clients")
        self.sched = cfg.algo.schedule_for(cfg.sched)
        self.server, self.clients = alg.init_states(self.task, cfg.algo, self.task.initial_theta())
        self.metrics = metrics
        self._pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def initial_record(self) -> dict:
        return _record(0, self.task, self.server.theta, self.cfg, self.clients, None, 0.0)

    def step(self, on_round: Optional[Callable] = None) -> Optional[dict]:
        cfg, task = self.cfg, self.task
        t = self.server.round
        t0 = time.perf_counter()
        lrs = round_lrs(self.sched, t)
        selected = sample_clients(cfg.seed, t, task.m, cfg.participation)
        record = cfg.diagnostics or on_round is not None
        server = self.server

        def work(i):
            batches = alg.draw_batches(client_rng(cfg.seed, t, i), task.n, self.sched.K,
                                       cfg.batch_size)
            return alg.client_work(cfg.algo, task, i, server, self.clients[i], lrs, batches, record)

        if self._pool is None:
            results = [work(i) for i in selected]
        else:
            results = list(self._pool.map(work, selected))
        bad = [int(i) for i, r in zip(selected, results) if not all_finite(r.theta)]
        if bad:
            raise DivergenceError(f"non-finite local model in round {t}",
                                  {"round": t, "clients": bad,
                                   "server_norm": float(np.linalg.norm(server.theta))})
        new = alg.server_round(cfg.algo, server, self.clients, selected, results,
                               round_base_lr(self.sched, t), self.sched.K)
        if not all_finite(new.theta):
            raise DivergenceError(f"non-finite global model after round {t}",
                                  {"round": t, "clients": [int(i) for i in selected],
                                   "prev_norm": float(np.linalg.norm(server.theta))})
        if on_round is not None:
            on_round(t, selected, results, server, new, self.clients)
        self.server = new
        if not self.metrics:
            return None
        drift = measure_client_drift(results, server.theta) if cfg.diagnostics else None
        wall = (time.perf_counter() - t0) * 1e3
        return _record(t + 1, task, new.theta, cfg, self.clients, drift, wall)


def run_round(sim: Simulation, on_round=None) -> dict:
    return sim.step(on_round)


def run_experiment(cfg: RunConfig, task: Optional[TaskSpec] = None, keep_thetas=False,
                   on_round: Optional[Callable] = None, metrics=True) -> RunMetrics:
    """Execute ``cfg.rounds`` rounds and return T+1 records (t = 0 included)."""
    out = RunMetrics(thetas=[] if keep_thetas else None)
    with Simulation(cfg, task, metrics=metrics) as sim:
        if metrics:
            out.records.append(sim.initial_record())
        if keep_thetas:
            out.thetas.append(sim.server.theta.copy())
        for _ in range(cfg.rounds):
            try:
                rec = sim.step(on_round)
            except DivergenceError as err:
                err.metrics = out
                log.error("run aborted: %s %s", err, err.diagnostics)
                raise
            if metrics:
                out.records.append(rec)
            if keep_thetas:
                out.thetas.append(sim.server.theta.copy())
        out.final_server = sim.server
    return out
