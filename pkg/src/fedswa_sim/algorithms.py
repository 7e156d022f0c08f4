"""Client update and server aggregation rules.

Six algorithms share one local loop::

    theta <- theta - lr_k * direction_k

and differ only in how ``direction_k`` is formed, which step sizes are used
and how the server folds the returned models and control variates back in.

==========  ===========  =================================  ===========
name        local LR     direction                          server step
==========  ===========  =================================  ===========
fedavg      constant     g                                  mean
fedsam      constant     g at theta + sam_perturb(g)        mean
mofedsam    constant     b*g_sam + (1-b)*delta_prev         mean
scaffold    constant     g - c_i + c                        alpha
fedswa      cyclical     g                                  alpha (EMA)
fedmoswa    cyclical     g - c_i + m                        alpha (EMA)
==========  ===========  =================================  ===========

MoFedSAM's local momentum rule is a reconstruction (the source only describes
it informally); nothing else in the package depends on its details.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from .numkit import l2_norm, mean_vecs
from .schedules import LrSchedule
from .tasks import TaskSpec

ALGORITHMS = ("fedavg", "fedsam", "mofedsam", "scaffold", "fedswa", "fedmoswa")
CYCLICAL = frozenset({"fedswa", "fedmoswa"})
WITH_CONTROL = frozenset({"scaffold", "fedmoswa"})
SAM_BASED = frozenset({"fedsam", "mofedsam"})
SAM_EPS = 1e-12


class AlgorithmError(ValueError):
    pass


@dataclass(frozen=True)
class AlgoConfig:
    name: str = "fedmoswa"
    alpha: float = 1.5
    gamma: float = 0.2
    sam_radius: float = 0.05
    ctrl_option: int = 2
    mom_beta: float = 0.9
    ctrl_init: str = "zero"
    swa_shadow: bool = False

    def __post_init__(self):
        if self.name not in ALGORITHMS:
            raise AlgorithmError(f"unknown algorithm {self.name!r}; expected one of {ALGORITHMS}")
        if self.alpha <= 0:
            raise AlgorithmError("alpha must be > 0")
        if not 0 < self.gamma <= 1:
            raise AlgorithmError("gamma must lie in (0, 1]")
        if self.sam_radius < 0:
            raise AlgorithmError("sam_radius must be >= 0")
        if self.ctrl_option not in (1, 2):
            raise AlgorithmError("ctrl_option must be 1 or 2")
        if not 0 <= self.mom_beta <= 1:
            raise AlgorithmError("mom_beta must lie in [0, 1]")
        if self.ctrl_init not in ("zero", "grad"):
            raise AlgorithmError("ctrl_init must be 'zero' or 'grad'")

    def server_alpha(self) -> float:
        return 1.0 if self.name in ("fedavg", "fedsam", "mofedsam") else self.alpha

    def schedule_for(self, sched: LrSchedule) -> LrSchedule:
        return sched if self.name in CYCLICAL else sched.constant()


@dataclass
class ClientState:
    ctrl: np.ndarray
    client_id: int = 0


@dataclass
class ServerState:
    theta: np.ndarray
    sctl: np.ndarray
    round: int = 0
    alg: str = "fedmoswa"
    swa_running: Optional[np.ndarray] = None
    swa_count: int = 0
    delta_prev: Optional[np.ndarray] = None


@dataclass
class LocalResult:
    theta: np.ndarray
    ctrl: Optional[np.ndarray] = None
    trajectory: Optional[List[np.ndarray]] = None
    grads: Optional[List[np.ndarray]] = None
    lrs: Optional[np.ndarray] = None


# ---------------------------------------------------------------- batches


def draw_batches(rng: np.random.Generator, n: int, K: int, batch_size: Optional[int]):
    """Row indices for K minibatches (with replacement); ``None`` means full batch."""
    if not batch_size:
        return None
    return rng.integers(0, n, size=(K, batch_size), dtype=np.int64)


def _rows(task: TaskSpec, batches, k):
    return task._all_rows if batches is None else batches[k]


# ------------------------------------------------------------- primitives


def sam_perturb(grad: np.ndarray, sam_radius: float) -> np.ndarray:
    """First-order SAM ascent step ``r * g / ||g||`` (zero when g ~ 0 or r == 0)."""
    nrm = l2_norm(grad)
    if sam_radius == 0.0 or nrm < SAM_EPS:
        return np.zeros_like(grad)
    return (sam_radius / nrm) * grad


def _local_loop(task, i, theta, lrs, batches, *, correction=None, sam_radius=0.0,
                momentum=None, record=False) -> LocalResult:
    """K local steps. ``correction`` is the pair (c_i, m); ``momentum`` is (beta, delta)."""
    theta = np.array(theta, dtype=np.float64, copy=True)
    traj = [theta.copy()] if record else None
    grads = [] if record else None
    for k, lr in enumerate(lrs):
        rows = _rows(task, batches, k)
        _, g = task.loss_grad_rows(i, theta, rows)
        if sam_radius > 0.0:
            eps = sam_perturb(g, sam_radius)
            _, g = task.loss_grad_rows(i, theta + eps, rows)
        if record:
            grads.append(g)
        d = g
        if correction is not None:
            c_i, m = correction
            d = (g - c_i) + m
        if momentum is not None:
            b, delta = momentum
            d = b * g + (1.0 - b) * delta
        theta = theta - lr * d
        if record:
            traj.append(theta.copy())
    return LocalResult(theta, trajectory=traj, grads=grads, lrs=np.asarray(lrs))


def local_update_fedavg(task, client_i, theta, lrs, batches=None, record=False) -> LocalResult:
    """Plain minibatch SGD with the given per-step rates.

    FedAvg passes constant rates; FedSWA passes the cyclical ones.
    """
    return _local_loop(task, client_i, theta, lrs, batches, record=record)


def local_update_fedsam(task, client_i, theta, lrs, batches=None, sam_radius=0.05,
                        record=False) -> LocalResult:
    return _local_loop(task, client_i, theta, lrs, batches, sam_radius=sam_radius, record=record)


def local_update_mofedsam(task, client_i, theta, delta_prev, cfg: AlgoConfig, lrs, batches=None,
                          record=False) -> LocalResult:
    delta = np.zeros_like(theta) if delta_prev is None else delta_prev
    return _local_loop(task, client_i, theta, lrs, batches, sam_radius=cfg.sam_radius,
                       momentum=(cfg.mom_beta, delta), record=record)


def local_update_fedmoswa(task, client_i, theta, ctrl_i, sctl, lrs, batches=None,
                          record=False) -> LocalResult:
    return _local_loop(task, client_i, theta, lrs, batches, correction=(ctrl_i, sctl), record=record)


def control_update(option: int, task, client_i, theta_prev, theta_local, ctrl_i, sctl,
                   sum_eta: float) -> np.ndarray:
    """New client control ``c_i+``.

    Option 1: full-batch gradient of client ``i`` at the received model.
    Option 2: ``c_i - sctl + (theta_prev - theta_local) / sum_eta``.
    """
    if option == 1:
        return task.full_loss_grad(client_i, theta_prev)[1]
    if option == 2:
        if sum_eta <= 0:
            raise AlgorithmError("option 2 needs a positive sum of local step sizes")
        return (ctrl_i - sctl) + (theta_prev - theta_local) / sum_eta
    raise AlgorithmError(f"unknown control option {option!r}")


def local_update_scaffold(task, client_i, theta, ctrl_i, ctrl_global, lrs, batches=None,
                          option=2, record=False):
    """SCAFFOLD client: corrected steps then the matching control refresh."""
    res = _local_loop(task, client_i, theta, lrs, batches, correction=(ctrl_i, ctrl_global),
                      record=record)
    res.ctrl = control_update(option, task, client_i, theta, res.theta, ctrl_i, ctrl_global,
                              float(np.sum(lrs)))
    return res


def server_control_update(sctl: np.ndarray, deltas: Sequence[np.ndarray], gamma: float,
                          s: Optional[int] = None) -> np.ndarray:
    """``sctl + gamma * mean(deltas)`` where each delta is ``c_i+ - sctl``."""
    if len(deltas) == 0:
        raise AlgorithmError("server control update with no participating clients")
    if s is not None and s != len(deltas):
        raise AlgorithmError(f"s={s} but {len(deltas)} deltas were given")
    return sctl + gamma * mean_vecs(deltas)


def scaffold_control_update(c: np.ndarray, new_ctrls, old_ctrls, m: int) -> np.ndarray:
    """``c + (1/m) * sum(c_i+ - c_i)`` over the participating clients."""
    if len(new_ctrls) == 0:
        raise AlgorithmError("control update with no participating clients")
    acc = np.zeros_like(c)
    for new, old in zip(new_ctrls, old_ctrls):
        acc += new - old
    return c + acc / m


def server_aggregate(theta_prev: np.ndarray, client_models: Sequence[np.ndarray],
                     alpha: float) -> np.ndarray:
    """EMA/extrapolation toward the client mean; alpha == 1 is plain averaging."""
    if len(client_models) == 0:
        raise AlgorithmError("aggregate of an empty client list")
    v = mean_vecs(client_models)
    if alpha == 1.0:
        return v
    return theta_prev + alpha * (v - theta_prev)


# ------------------------------------------------------------------ glue


def init_states(task: TaskSpec, cfg: AlgoConfig, theta0: np.ndarray):
    clients = []
    for i in range(task.m):
        if cfg.ctrl_init == "grad" and cfg.name in WITH_CONTROL:
            c = task.full_loss_grad(i, theta0)[1]
        else:
            c = np.zeros(task.dim)
        clients.append(ClientState(ctrl=c, client_id=i))
    if cfg.ctrl_init == "grad" and cfg.name in WITH_CONTROL:
        sctl = mean_vecs([c.ctrl for c in clients])
    else:
        sctl = np.zeros(task.dim)
    server = ServerState(theta=theta0.copy(), sctl=sctl, round=0, alg=cfg.name)
    if cfg.swa_shadow:
        server.swa_running = theta0.copy()
        server.swa_count = 1
    return server, clients


def client_work(cfg: AlgoConfig, task, i, server: ServerState, client: ClientState, lrs,
                batches, record=False) -> LocalResult:
    """Run client ``i``'s local update for the configured algorithm."""
    name = cfg.name
    if name in ("fedavg", "fedswa"):
        return local_update_fedavg(task, i, server.theta, lrs, batches, record)
    if name == "fedsam":
        return local_update_fedsam(task, i, server.theta, lrs, batches, cfg.sam_radius, record)
    if name == "mofedsam":
        return local_update_mofedsam(task, i, server.theta, server.delta_prev, cfg, lrs, batches,
                                     record)
    if name == "scaffold":
        return local_update_scaffold(task, i, server.theta, client.ctrl, server.sctl, lrs, batches,
                                     cfg.ctrl_option, record)
    res = local_update_fedmoswa(task, i, server.theta, client.ctrl, server.sctl, lrs, batches, record)
    res.ctrl = control_update(cfg.ctrl_option, task, i, server.theta, res.theta, client.ctrl,
                              server.sctl, float(np.sum(lrs)))
    return res


def server_round(cfg: AlgoConfig, server: ServerState, clients: List[ClientState], selected,
                 results: List[LocalResult], base_lr: float, K: int) -> ServerState:
    """Fold client results into a new server state; updates ``clients`` in place.

    ``selected`` must be in ascending client order (fixes the reduction order).
    """
    theta = server_aggregate(server.theta, [r.theta for r in results], cfg.server_alpha())
    sctl = server.sctl
    if cfg.name == "scaffold":
        sctl = scaffold_control_update(sctl, [r.ctrl for r in results],
                                       [clients[i].ctrl for i in selected], len(clients))
    elif cfg.name == "fedmoswa":
        sctl = server_control_update(sctl, [r.ctrl - server.sctl for r in results], cfg.gamma)
    if cfg.name in WITH_CONTROL:
        for i, r in zip(selected, results):
            clients[i].ctrl = r.ctrl
    new = replace(server, theta=theta, sctl=sctl, round=server.round + 1)
    if cfg.name == "mofedsam":
        denom = K * base_lr
        new.delta_prev = (server.theta - theta) / denom if denom > 0 else np.zeros_like(theta)
    if server.swa_running is not None:
        new.swa_running = (server.swa_running * server.swa_count + theta) / (server.swa_count + 1)
        new.swa_count = server.swa_count + 1
    return new
