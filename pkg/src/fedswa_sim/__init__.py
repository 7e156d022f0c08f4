"""Deterministic federated-optimisation simulator (FedAvg, FedSAM, MoFedSAM,
SCAFFOLD, FedSWA, FedMoSWA) with an empirical uniform-stability probe."""
from ._accel import backend
from .algorithms import ALGORITHMS, AlgoConfig
from .engine import RunConfig, RunMetrics, TaskConfig, run_experiment
from .schedules import LrSchedule, local_lr, round_base_lr
from .tasks import TaskSpec, make_logreg, make_mlp, make_quadratic

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS", "AlgoConfig", "LrSchedule", "RunConfig", "RunMetrics", "TaskConfig",
    "TaskSpec", "backend", "local_lr", "make_logreg", "make_mlp", "make_quadratic",
    "round_base_lr", "run_experiment",
]
