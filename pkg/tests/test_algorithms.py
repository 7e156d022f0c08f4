from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import minimize_scalar

from fedswa_sim.algorithms import (AlgoConfig, AlgorithmError, control_update, draw_batches,
                                   local_update_fedavg, local_update_fedmoswa,
                                   local_update_fedsam, local_update_mofedsam,
                                   local_update_scaffold, sam_perturb, server_aggregate,
                                   server_control_update)
from fedswa_sim.engine import RunConfig, TaskConfig, run_experiment
from fedswa_sim.schedules import LrSchedule, round_lrs
from fedswa_sim.tasks import make_quadratic, quadratic_task


def unit_task(b=0.0, n=1):
    return quadratic_task(np.ones((1, 1, 1)), np.full((1, n, 1), b))


# ------------------------------------------------------------ fedavg step


def test_single_gradient_step():
    res = local_update_fedavg(unit_task(), 0, np.array([1.0]), [0.1])
    np.testing.assert_allclose(res.theta, [0.9], rtol=0, atol=1e-16)


def test_zero_rate_leaves_model():
    t = make_quadratic(3, 2, 10, noise_sigma=0.5)
    theta = np.array([0.3, -1.0, 2.0])
    batches = draw_batches(np.random.default_rng(0), t.n, 4, 3)
    res = local_update_fedavg(t, 1, theta, [0.0] * 4, batches)
    np.testing.assert_array_equal(res.theta, theta)


def test_client_optimum_is_fixed_point():
    t = quadratic_task(np.stack([np.eye(2)] * 2), np.array([[[1.0, -1.0]] * 3, [[0.0, 4.0]] * 3]))
    res = local_update_fedavg(t, 1, np.array([0.0, 4.0]), [0.3] * 5)
    np.testing.assert_array_equal(res.theta, [0.0, 4.0])


def test_batches_consume_exactly_k_draws():
    a = np.random.default_rng(3)
    b = np.random.default_rng(3)
    draw_batches(a, 20, 6, 4)
    b.integers(0, 20, size=(6, 4))
    assert a.integers(1 << 30) == b.integers(1 << 30)
    assert draw_batches(np.random.default_rng(0), 20, 6, 0) is None


# ------------------------------------------------------------------- SAM


def test_sam_perturb_examples():
    np.testing.assert_allclose(sam_perturb(np.array([3.0, 4.0]), 1.0), [0.6, 0.8], atol=1e-16)
    np.testing.assert_array_equal(sam_perturb(np.array([3.0, 4.0]), 0.0), [0.0, 0.0])
    np.testing.assert_array_equal(sam_perturb(np.zeros(3), 0.5), np.zeros(3))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)), st.floats(1e-3, 10.0))
def test_sam_perturb_has_radius_norm(g, r):
    eps = sam_perturb(g, r)
    if np.linalg.norm(g) >= 1e-12:
        assert abs(np.linalg.norm(eps) - r) <= 1e-12 * max(1.0, r)
    else:
        assert not eps.any()


def test_fedsam_radius_zero_matches_fedavg_bitwise():
    t = make_quadratic(4, 3, 15, noise_sigma=0.4, seed=2)
    batches = draw_batches(np.random.default_rng(1), t.n, 7, 5)
    theta = np.ones(4)
    a = local_update_fedavg(t, 2, theta, [0.05] * 7, batches).theta
    b = local_update_fedsam(t, 2, theta, [0.05] * 7, batches, sam_radius=0.0).theta
    assert a.tobytes() == b.tobytes()


def test_fedsam_hand_trace():
    res = local_update_fedsam(unit_task(), 0, np.array([1.0]), [0.1], sam_radius=0.1)
    # ascent to 1.1, gradient there 1.1, step 0.1 * 1.1
    np.testing.assert_allclose(res.theta, [0.89], atol=1e-15)


def _sam_objective(A, b, r, theta):
    """max over ||e|| = r of the quadratic, by a bounded 1-d search over the angle."""
    def neg(phi):
        e = r * np.array([np.cos(phi), np.sin(phi)])
        d = theta + e - b
        return -0.5 * d @ A @ d
    grid = np.linspace(0, 2 * np.pi, 721)
    best = grid[np.argmin([neg(p) for p in grid])]
    res = minimize_scalar(neg, bounds=(best - 0.01, best + 0.01), method="bounded",
                          options={"xatol": 1e-12})
    return -res.fun


def test_sam_direction_matches_finite_difference_of_inner_max():
    A = np.array([[2.0, 0.3], [0.3, 0.5]])
    b = np.array([0.2, -0.4])
    r = 0.05
    t = quadratic_task(A[None], b[None, None, :])
    theta = np.array([1.0, 0.7])
    res = local_update_fedsam(t, 0, theta, [1.0], sam_radius=r)
    direction = theta - res.theta
    h = 1e-5
    fd = np.array([(_sam_objective(A, b, r, theta + h * e) - _sam_objective(A, b, r, theta - h * e)) / (2 * h)
                   for e in np.eye(2)])
    assert np.linalg.norm(direction - fd) <= 0.05 * np.linalg.norm(fd)


# -------------------------------------------------------------- MoFedSAM


def test_mofedsam_without_momentum_is_fedsam():
    t = make_quadratic(3, 2, 10, noise_sigma=0.3, seed=4)
    batches = draw_batches(np.random.default_rng(2), t.n, 5, 4)
    theta = np.zeros(3)
    cfg = AlgoConfig(name="mofedsam", mom_beta=1.0, sam_radius=0.05)
    a = local_update_mofedsam(t, 0, theta, np.ones(3), cfg, [0.1] * 5, batches).theta
    b = local_update_fedsam(t, 0, theta, [0.1] * 5, batches, 0.05).theta
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


def test_mofedsam_zero_delta_scales_rate():
    t = make_quadratic(3, 2, 10, noise_sigma=0.3, seed=4)
    batches = draw_batches(np.random.default_rng(2), t.n, 5, 4)
    theta = np.zeros(3)
    cfg = AlgoConfig(name="mofedsam", mom_beta=0.7, sam_radius=0.05)
    a = local_update_mofedsam(t, 1, theta, None, cfg, [0.1] * 5, batches).theta
    b = local_update_fedsam(t, 1, theta, [0.07] * 5, batches, 0.05).theta
    np.testing.assert_allclose(a, b, rtol=1e-13)


def test_mofedsam_first_round_is_scaled_fedsam():
    base = RunConfig(task=TaskConfig(dim=3, clients=4, samples_per_client=10),
                     sched=LrSchedule(eta_l=0.1, K=4), rounds=1, participation=4, batch_size=3)
    mo = run_experiment(replace(base, algo=AlgoConfig(name="mofedsam", mom_beta=0.6)), keep_thetas=True)
    fs = run_experiment(replace(base, algo=AlgoConfig(name="fedsam"),
                                sched=LrSchedule(eta_l=0.06, K=4)), keep_thetas=True)
    np.testing.assert_allclose(mo.thetas[1], fs.thetas[1], rtol=1e-12)


# -------------------------------------------------------------- controls


def test_option2_single_step_is_the_gradient():
    t = make_quadratic(3, 2, 10, noise_sigma=0.3, seed=1)
    batches = draw_batches(np.random.default_rng(0), t.n, 1, 2)
    theta = np.array([0.5, 0.1, -0.2])
    c_i = np.array([0.3, 0.0, 1.0])
    m = np.array([-0.1, 0.2, 0.4])
    res = local_update_fedmoswa(t, 0, theta, c_i, m, [0.07], batches, record=True)
    c_new = control_update(2, t, 0, theta, res.theta, c_i, m, 0.07)
    np.testing.assert_allclose(c_new, res.grads[0], rtol=1e-12)


def test_option2_is_rate_weighted_mean_of_gradients():
    t = make_quadratic(4, 3, 20, noise_sigma=0.3, seed=1)
    lrs = round_lrs(LrSchedule(eta_l=0.1, rho=0.1, K=8), 3)
    batches = draw_batches(np.random.default_rng(0), t.n, 8, 4)
    theta = np.ones(4)
    c_i, m = np.full(4, 0.2), np.full(4, -0.3)
    res = local_update_fedmoswa(t, 2, theta, c_i, m, lrs, batches, record=True)
    c_new = control_update(2, t, 2, theta, res.theta, c_i, m, float(np.sum(lrs)))
    weighted = sum(lr * g for lr, g in zip(lrs, res.grads)) / np.sum(lrs)
    np.testing.assert_allclose(c_new, weighted, rtol=1e-10)


def test_option1_is_full_gradient_at_received_model():
    t = quadratic_task(np.stack([np.diag([1.0, 3.0])] * 2), np.array([[[1.0, 2.0]] * 3, [[0.0, -1.0]] * 3]))
    theta = np.array([0.5, 0.5])
    c = control_update(1, t, 0, theta, theta * 0, np.zeros(2), np.zeros(2), 1.0)
    np.testing.assert_allclose(c, np.diag([1.0, 3.0]) @ (theta - [1.0, 2.0]))


def test_option2_needs_positive_rate_sum():
    with pytest.raises(AlgorithmError):
        control_update(2, None, 0, np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), 0.0)


def test_zero_controls_reduce_to_fedswa_bitwise():
    t = make_quadratic(4, 3, 20, noise_sigma=0.3, seed=1)
    lrs = round_lrs(LrSchedule(eta_l=0.1, rho=0.1, K=8), 0)
    batches = draw_batches(np.random.default_rng(0), t.n, 8, 4)
    a = local_update_fedmoswa(t, 1, np.ones(4), np.zeros(4), np.zeros(4), lrs, batches).theta
    b = local_update_fedavg(t, 1, np.ones(4), lrs, batches).theta
    assert a.tobytes() == b.tobytes()


def test_exact_controls_follow_global_gradient():
    t = make_quadratic(3, 4, 10, hetero_knob=2.0, noise_sigma=0.0, seed=3)
    theta = np.array([0.4, -0.2, 0.9])
    i = 2
    c_i = t.full_loss_grad(i, theta)[1]
    m = t.global_loss_grad(theta)[1]
    res = local_update_fedmoswa(t, i, theta, c_i, m, [0.05], None)
    np.testing.assert_allclose(res.theta, theta - 0.05 * m, atol=1e-15)


def test_single_client_option1_controls_cancel_after_one_round():
    base = RunConfig(task=TaskConfig(dim=3, clients=1, samples_per_client=10, noise_sigma=0.0),
                     algo=AlgoConfig(name="fedmoswa", ctrl_option=1, gamma=1.0),
                     sched=LrSchedule(eta_l=0.1, rho=0.1, K=5, round_decay=1.0),
                     rounds=1, participation=1, batch_size=0)
    res = run_experiment(base, keep_thetas=True)
    srv = res.final_server
    task = base.task.build()
    # c_1 = full gradient at theta_0 and m = c_1, so the next round's correction is zero
    c1 = task.full_loss_grad(0, task.initial_theta())[1]
    np.testing.assert_allclose(srv.sctl, c1, atol=1e-15)
    lrs = round_lrs(base.sched, 1)
    mo = local_update_fedmoswa(task, 0, srv.theta, c1, srv.sctl, lrs, None).theta
    swa = local_update_fedavg(task, 0, srv.theta, lrs, None).theta
    np.testing.assert_allclose(mo, swa, atol=1e-14)


def test_homogeneous_clients_get_equal_controls():
    A = np.stack([np.diag([1.0, 2.0])] * 3)
    X = np.stack([np.array([[0.5, -1.0], [1.5, 0.0], [1.0, 1.0]])] * 3)
    t = quadratic_task(A, X)
    theta = np.array([2.0, 2.0])
    outs = [local_update_scaffold(t, i, theta, np.zeros(2), np.zeros(2), [0.1] * 4, None).ctrl
            for i in range(3)]
    for o in outs[1:]:
        np.testing.assert_array_equal(o, outs[0])


# ----------------------------------------------------------------- server


def test_server_control_update_examples():
    s = np.array([0.5, -1.0])
    cs = [np.array([1.0, 1.0]), np.array([3.0, -1.0])]
    np.testing.assert_allclose(server_control_update(s, [c - s for c in cs], 1.0), [2.0, 0.0])
    np.testing.assert_array_equal(server_control_update(s, [c - s for c in cs], 0.0), s)
    np.testing.assert_allclose(server_control_update(np.zeros(1), [np.ones(1)], 0.2), [0.2])
    with pytest.raises(AlgorithmError):
        server_control_update(s, [], 0.5)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-100, 100)), st.floats(0.0, 1.0))
def test_server_control_matches_ema_form(vs, gamma):
    s, cs = vs[0], list(vs[1:])
    direct = server_control_update(s, [c - s for c in cs], gamma)
    ema = (1 - gamma) * s + gamma * np.mean(cs, axis=0)
    np.testing.assert_allclose(direct, ema, atol=1e-10)


def test_server_aggregate_examples():
    prev = np.array([0.0])
    models = [np.array([1.0]), np.array([3.0])]
    np.testing.assert_array_equal(server_aggregate(prev, models, 1.0), [2.0])
    np.testing.assert_array_equal(server_aggregate(prev, models, 1e-300 * 0 + 0.0 + 1e-300), [2e-300])
    np.testing.assert_array_equal(server_aggregate(np.array([0.0]), [np.array([2.0])], 1.5), [3.0])
    with pytest.raises(AlgorithmError):
        server_aggregate(prev, [], 1.0)


def test_server_aggregate_alpha_zero_keeps_model():
    prev = np.array([0.7, -0.1])
    np.testing.assert_array_equal(server_aggregate(prev, [np.ones(2)], 0.0), prev)


def test_config_validation():
    with pytest.raises(AlgorithmError):
        AlgoConfig(name="fedprox")
    with pytest.raises(AlgorithmError):
        AlgoConfig(gamma=0.0)
    with pytest.raises(AlgorithmError):
        AlgoConfig(ctrl_option=3)
