"""Local learning-rate schedules.

Within a round the client step size falls linearly from the round's base
rate to ``rho`` times it; every round restarts the cycle from a base rate
that itself decays geometrically with the round index.
"""
from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class LrSchedule:
    eta_l: float = 0.1
    rho: float = 0.1
    K: int = 10
    round_decay: float = 0.998

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ScheduleError(f"rho must lie in [0, 1], got {self.rho}")
        if self.eta_l < 0:
            raise ScheduleError("eta_l must be >= 0")
        if self.K < 1:
            raise ScheduleError("K must be >= 1")
        if not 0.0 < self.round_decay <= 1.0:
            raise ScheduleError("round_decay must lie in (0, 1]")

    def constant(self) -> "LrSchedule":
        """Same base rate and decay, no intra-round decay (rho = 1)."""
        return LrSchedule(self.eta_l, 1.0, self.K, self.round_decay)


def _cyclic(base: float, rho: float, k: int, K: int) -> float:
    if k < 0 or k > K:
        raise ScheduleError(f"local step {k} outside [0, {K}]")
    if k == 0:
        return base
    if k == K:
        return rho * base
    # algebraically base*(1 - k/K) + (k/K)*rho*base; this form is exactly
    # `base` when rho == 1
    return base * (1.0 - (1.0 - rho) * (k / K))


def local_lr(sched: LrSchedule, k: int, K: int = None) -> float:
    """Step size for local step ``k`` of a cycle of length ``K`` (round 0 base)."""
    return _cyclic(sched.eta_l, sched.rho, k, sched.K if K is None else K)


def round_base_lr(sched: LrSchedule, t: int) -> float:
    if t < 0:
        raise ScheduleError("round index must be >= 0")
    if sched.round_decay == 1.0:
        return sched.eta_l
    return sched.eta_l * sched.round_decay ** t


def round_lrs(sched: LrSchedule, t: int) -> np.ndarray:
    """The K step sizes used in round ``t`` (steps k = 0..K-1)."""
    base = round_base_lr(sched, t)
    return np.array([_cyclic(base, sched.rho, k, sched.K) for k in range(sched.K)])


def lr_sum_closed_form(eta_l: float, rho: float, K: int) -> float:
    """Sum of the K step sizes of one cycle, k = 0..K-1."""
    return eta_l * K * (1.0 + rho) / 2.0 + eta_l * (1.0 - rho) / 2.0
