import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedswa_sim.schedules import (LrSchedule, ScheduleError, local_lr, lr_sum_closed_form,
                                  round_base_lr, round_lrs)


def test_endpoints_and_midpoint():
    s = LrSchedule(eta_l=0.1, rho=0.1, K=50)
    assert local_lr(s, 0, 50) == 0.1
    assert local_lr(s, 50, 50) == 0.1 * 0.1
    assert local_lr(s, 25, 50) == pytest.approx(0.055, abs=1e-15)


def test_step_beyond_cycle_rejected():
    with pytest.raises(ScheduleError):
        local_lr(LrSchedule(K=5), 6, 5)


def test_invalid_rho_rejected():
    with pytest.raises(ScheduleError):
        LrSchedule(rho=1.5)


def test_round_base_lr():
    s = LrSchedule(eta_l=0.1, rho=0.5, K=3, round_decay=0.998)
    assert round_base_lr(s, 0) == 0.1
    assert round_base_lr(s, 1000) == pytest.approx(0.01351, abs=5e-6)


def test_rho_one_is_constant_exactly():
    s = LrSchedule(eta_l=0.037, rho=1.0, K=7)
    assert all(local_lr(s, k) == 0.037 for k in range(8))
    assert set(round_lrs(s, 0)) == {0.037}


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(0.0, 1.0), st.integers(1, 200))
def test_affine_and_monotone(eta, rho, K):
    s = LrSchedule(eta_l=eta, rho=rho, K=K)
    lrs = np.array([local_lr(s, k) for k in range(K + 1)])
    np.testing.assert_allclose(np.diff(lrs), -eta * (1 - rho) / K, atol=1e-14)
    assert np.all(np.diff(lrs) <= 1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(0.0, 1.0), st.integers(1, 200))
def test_sum_closed_form(eta, rho, K):
    s = LrSchedule(eta_l=eta, rho=rho, K=K)
    direct = sum(local_lr(s, k) for k in range(K))
    assert direct == pytest.approx(lr_sum_closed_form(eta, rho, K), rel=1e-12, abs=1e-15)


def test_round_lrs_restart_each_round():
    s = LrSchedule(eta_l=0.2, rho=0.1, K=4, round_decay=0.9)
    for t in range(3):
        lrs = round_lrs(s, t)
        assert lrs[0] == round_base_lr(s, t)
        assert len(lrs) == 4
