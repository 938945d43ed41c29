import math

import numpy as np
import pytest
import scipy.linalg

from ctrldt.classical import (HinfInfeasible, HinfPolicy, KalmanState, LQGPolicy, SearchConfig,
                              StaticGain, StaticPolicy, _episode_noise, fit_static_gain,
                              hinf_threshold, kalman_step, kalman_update, lqg_policy, riccati_map,
                              search_static_gain, simulate_static, solve_hinf_central, solve_lqr,
                              steady_state_kalman)
from ctrldt.datasets import run_episode
from ctrldt.environments import Env, LinearSystemSpec, RewardSpec
from ctrldt.errors import ContractError, SolverError
from ctrldt.tasks import builtin_task

from conftest import random_system, random_task

GOLDEN = (1 + math.sqrt(5)) / 2


def test_scalar_riccati_golden_ratio():
    sol = solve_lqr(1.0, 1.0, 1.0, 1.0)
    assert sol.P[0, 0] == pytest.approx(GOLDEN, abs=1e-8)
    assert sol.K[0, 0] == pytest.approx(GOLDEN - 1, abs=1e-8)


def test_lqr_matches_scipy_dare_with_cross_term(rng):
    for _ in range(5):
        sys = random_system(rng)
        Q1 = np.diag(rng.uniform(0.5, 2.0, 4))
        Q2 = np.diag(rng.uniform(0.5, 2.0, 2))
        Q3 = 0.1 * rng.standard_normal((4, 2))
        sol = solve_lqr(sys.A, sys.B2, Q1, Q2, Q3)
        P = scipy.linalg.solve_discrete_are(sys.A, sys.B2, Q1, Q2, s=Q3)
        np.testing.assert_allclose(sol.P, P, rtol=1e-7, atol=1e-8)
        assert sol.residual <= 1e-8


def test_finite_horizon_gains_are_stage_indexed(rng):
    sys = random_system(rng)
    sol = solve_lqr(sys.A, sys.B2, np.eye(4), np.eye(2), horizon=5)
    assert len(sol.gains) == 5 and len(sol.values) == 6
    np.testing.assert_array_equal(sol.values[-1], np.zeros((4, 4)))
    # the last stage only sees the stage cost, so its gain is zero
    np.testing.assert_allclose(sol.gains[-1], 0.0, atol=1e-15)
    P_prev, K = riccati_map(sol.values[2], sys.A, sys.B2, np.eye(4), np.eye(2), np.zeros((4, 2)))
    np.testing.assert_allclose(P_prev, sol.values[1])
    np.testing.assert_allclose(K, sol.gains[1])


def test_long_horizon_converges_to_stationary(rng):
    sys = random_system(rng)
    inf = solve_lqr(sys.A, sys.B2, np.eye(4), np.eye(2))
    fin = solve_lqr(sys.A, sys.B2, np.eye(4), np.eye(2), horizon=400)
    np.testing.assert_allclose(fin.gains[0], inf.K, atol=1e-8)


def test_lqr_rejects_bad_weights():
    with pytest.raises(ContractError):
        solve_lqr(1.0, 1.0, 1.0, 0.0)
    with pytest.raises(ContractError):
        solve_lqr(np.eye(2), np.ones((2, 1)), np.eye(3), np.eye(1))


def test_lqr_unstabilizable_diverges():
    A = np.diag([2.0, 0.5])
    B = np.array([[0.0], [1.0]])
    with pytest.raises(SolverError):
        solve_lqr(A, B, np.eye(2), np.eye(1), max_iter=200)


def test_scalar_kalman_update_by_hand():
    k = KalmanState(np.array([0.0]), np.array([[2.0]]))
    out = kalman_update(k, [1.0], [[1.0]], [[1.0]])
    assert out.x_hat[0] == pytest.approx(2 / 3)
    assert out.Sigma[0, 0] == pytest.approx(2 / 3)


def test_kalman_handles_singular_innovation():
    # zero sensor noise on an unobserved direction of the prior
    k = KalmanState(np.zeros(2), np.diag([1.0, 0.0]))
    out = kalman_update(k, [0.5, 0.0], np.eye(2), np.zeros((2, 2)))
    np.testing.assert_allclose(out.x_hat, [0.5, 0.0])
    np.testing.assert_allclose(out.Sigma, 0.0, atol=1e-15)


def test_kalman_rejects_indefinite_innovation():
    k = KalmanState(np.zeros(1), np.array([[1.0]]))
    with pytest.raises(SolverError):
        kalman_update(k, [0.0], [[1.0]], [[-5.0]])


def test_steady_state_kalman_matches_dual_dare(rng):
    sys = random_system(rng)
    Sigma, gain = steady_state_kalman(sys)
    ref = scipy.linalg.solve_discrete_are(sys.A.T, sys.C.T, 0.01 * np.eye(4), 0.01 * np.eye(2))
    np.testing.assert_allclose(Sigma, ref, rtol=1e-7, atol=1e-10)
    # iterating the exact filter converges to the stationary covariance
    k = KalmanState(np.zeros(4), np.eye(4))
    for _ in range(500):
        k = kalman_step(k, np.zeros(2), np.zeros(2), sys)
    P_post = Sigma - gain @ sys.C @ Sigma
    np.testing.assert_allclose(k.Sigma, P_post, atol=1e-8)


def test_lqg_policy_history_function_matches_stateful(rng):
    task = random_task(rng)
    pol = LQGPolicy(task.env, task.reward)
    env = Env(task)
    obs = [env.reset(4)]
    acts = []
    for _ in range(6):
        a = pol.act(obs[-1])
        acts.append(a)
        obs.append(env.step(a).obs)
    a_next = pol.act(obs[-1])
    np.testing.assert_allclose(lqg_policy(obs, acts, task.env, task.reward), a_next, atol=1e-12)


def test_lqg_beats_zero_control(rng):
    task = random_task(rng)
    lqg = np.mean([run_episode(task, LQGPolicy(task.env, task.reward), s, 0).ret for s in range(20)])
    zero = StaticPolicy(StaticGain.zeros(task.n_a, task.n_o))
    base = np.mean([run_episode(task, zero, s, 0).ret for s in range(20)])
    assert lqg > base


def test_hinf_large_gamma_recovers_lqg_gains(rng):
    sys = random_system(rng)
    rew = RewardSpec.identity(4, 2)
    ctrl = solve_hinf_central(sys, rew, 1e6)
    lqr = solve_lqr(sys.A, sys.B2, rew.Q1, rew.Q2)
    _, Lf = steady_state_kalman(sys)
    np.testing.assert_allclose(ctrl.K, lqr.K, rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(ctrl.filter_gain, Lf, rtol=1e-5, atol=1e-8)


def test_hinf_small_gamma_infeasible_and_falsy():
    task = builtin_task("he1")
    out = solve_hinf_central(task.env, task.reward, 0.01)
    assert isinstance(out, HinfInfeasible) and not out and out.reason
    with pytest.raises(ContractError):
        solve_hinf_central(task.env, task.reward, -1.0)


def test_hinf_threshold_bracket():
    task = builtin_task("he1")
    lo, hi = hinf_threshold(task.env, task.reward, 0.5, 1000.0, tol=1e-3)
    assert hi - lo <= 1e-3
    assert not solve_hinf_central(task.env, task.reward, lo)
    assert solve_hinf_central(task.env, task.reward, hi)
    # feasibility is monotone above the threshold
    assert all(solve_hinf_central(task.env, task.reward, g) for g in (hi * 1.5, hi * 10))


def test_hinf_policy_stabilizes():
    task = builtin_task("he1")
    ctrl = solve_hinf_central(task.env, task.reward, 20.0)
    assert ctrl
    J = np.mean([run_episode(task, HinfPolicy(ctrl), s, 0).ret for s in range(10)])
    assert np.isfinite(J)


def test_static_gain_contract():
    g = StaticGain([[1.0, 2.0]], [0.5])
    np.testing.assert_allclose(g([1.0, 1.0]), [-2.5])
    with pytest.raises(ContractError):
        StaticGain([[1.0]], [0.0, 1.0])
    again = StaticGain.from_dict(g.to_dict())
    np.testing.assert_array_equal(again.F, g.F)
    np.testing.assert_array_equal(again.bias, g.bias)


@pytest.mark.parametrize("name", ["he1", "cdr"])
def test_batched_simulation_matches_env(name):
    task = builtin_task(name)
    rng = np.random.default_rng(0)
    F = 0.1 * rng.standard_normal((2, task.n_a, task.n_o))
    b = 0.01 * rng.standard_normal((2, task.n_a))
    seeds = [np.random.SeedSequence([9, e]) for e in range(3)]
    J = simulate_static(task, F, b, _episode_noise(task, seeds))
    for c in range(2):
        pol = StaticPolicy(StaticGain(F[c], b[c]))
        for e, seed in enumerate(seeds):
            ref = run_episode(task, pol, seed, 0).ret
            assert J[c, e] == pytest.approx(ref, rel=1e-10)


def test_search_improves_and_orders_demonstrators():
    task = builtin_task("he1")
    cfg = SearchConfig(iterations=30, seed=1)
    res = search_static_gain(task, cfg)
    assert res.final_return >= res.initial_return
    trace_best = [b for _, _, b in res.trace]
    assert all(b2 >= b1 for b1, b2 in zip(trace_best, trace_best[1:]))
    assert res.trace_csv().startswith("iteration,mean_return,best_return\n")
    again = search_static_gain(task, cfg)
    np.testing.assert_array_equal(res.expert.F, again.expert.F)
    exp, _ = fit_static_gain(task, cfg, "converged")
    med, _ = fit_static_gain(task, cfg, "early_stopped")
    np.testing.assert_array_equal(exp.F, res.expert.F)
    np.testing.assert_array_equal(med.F, res.medium.F)
    with pytest.raises(ContractError):
        fit_static_gain(task, cfg, "halfway")


def test_static_policy_noise_uses_policy_rng():
    pol = StaticPolicy(StaticGain.zeros(1, 1), action_std=1.0)
    pol.reset(np.random.default_rng(3))
    a1 = pol.act([0.0])
    pol.reset(np.random.default_rng(3))
    np.testing.assert_array_equal(pol.act([0.0]), a1)


def test_linear_spec_round_trip(rng):
    sys = random_system(rng)
    again = LinearSystemSpec.from_dict(sys.to_dict())
    np.testing.assert_array_equal(again.A, sys.A)
