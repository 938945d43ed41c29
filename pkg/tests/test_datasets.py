import numpy as np
import pytest
import scipy.stats

from ctrldt.classical import StaticGain, StaticPolicy
from ctrldt.datasets import (CDR_OOD, PERTURBATION_SIZES, Dataset, NormalizationAnchors,
                             Trajectory, linear_task_set, make_windows, normalize_score,
                             out_dist_params, pde_task_set, perturb_linear_task, read_dataset,
                             reward_to_go, rollout_collect, sample_pde_params, sample_pde_task,
                             window_arrays, write_dataset)
from ctrldt.environments import LinearSystemSpec, RewardSpec
from ctrldt.errors import ContractError, DatasetError, SearchError
from ctrldt.tasks import TaskSpec, builtin_task


def _traj(rng, T1=50, n_o=2, n_a=1, task_id="t"):
    return Trajectory(rng.standard_normal((T1, n_o)), rng.standard_normal((T1, n_a)),
                      rng.standard_normal(T1), task_id)


def test_reward_to_go_examples(rng):
    np.testing.assert_array_equal(reward_to_go([1, 1, 1]), [3, 2, 1])
    np.testing.assert_array_equal(reward_to_go([4.5]), [4.5])
    r = rng.standard_normal(50)
    brute = np.array([sum(r[t:]) for t in range(50)])
    np.testing.assert_allclose(reward_to_go(r), brute, atol=1e-12)
    np.testing.assert_allclose(reward_to_go(3.0 * r), 3.0 * reward_to_go(r), atol=1e-12)
    with pytest.raises(ContractError):
        reward_to_go([])


def test_normalize_score_endpoints():
    a = NormalizationAnchors(J_expert=-10.0, J_medium=-30.0)
    assert normalize_score(-10.0, a) == 1.0
    assert normalize_score(-30.0, a) == 0.0
    assert normalize_score(-20.0, a) == 0.5
    assert normalize_score(0.0, a) > 1.0
    with pytest.raises(ContractError):
        NormalizationAnchors(J_expert=-30.0, J_medium=-10.0)


def test_trajectory_validation(rng):
    with pytest.raises(ContractError):
        Trajectory(np.zeros((3, 1)), np.zeros((2, 1)), np.zeros(3))
    with pytest.raises(ContractError):
        Trajectory(np.zeros((2, 1)), np.zeros((2, 1)), [0.0, np.nan])


def test_windows_count_padding_and_reconstruction(rng):
    tr = _traj(rng)
    wins = make_windows(tr, 20)
    assert len(wins) == 50
    assert (~wins[0].mask).sum() == 19
    assert all(w.mask.all() for w in wins[19:])
    for w in wins:
        # padding is contiguous at the left and zero-filled
        first = np.argmax(w.mask)
        assert w.mask[first:].all() and not w.mask[:first].any()
        assert np.all(w.obs[:first] == 0) and np.all(w.rtg[:first] == 0)
        np.testing.assert_array_equal(w.timesteps, np.arange(20))
    obs = np.array([w.obs[-1] for w in wins])
    act = np.array([w.act[-1] for w in wins])
    rtg = np.array([w.rtg[-1] for w in wins])
    np.testing.assert_array_equal(obs, tr.obs)
    np.testing.assert_array_equal(act, tr.act)
    np.testing.assert_allclose(rtg, reward_to_go(tr.rew), atol=1e-12)
    with pytest.raises(ContractError):
        make_windows(tr, 0)


def test_window_arrays_stack_all_trajectories(rng):
    arr = window_arrays([_traj(rng, 5), _traj(rng, 7)], 3)
    assert arr["rtg"].shape == (12, 3)
    assert arr["obs"].shape == (12, 3, 2)
    assert arr["mask"].sum() == 3 * 12 - 3 - 3


def test_perturbation_norms_exact():
    he1 = builtin_task("he1")
    t = perturb_linear_task(he1, PERTURBATION_SIZES["he1"]["in_dist"], seed=3)
    assert np.linalg.norm(t.env.A - he1.env.A) == pytest.approx(0.05, abs=1e-12)
    assert np.linalg.norm(t.env.B2 - he1.env.B2) == pytest.approx(0.05, abs=1e-12)
    assert t.provenance == {"type": "perturbed", "nominal": "he1-nominal", "dA_norm": 0.05,
                            "dB2_norm": 0.05, "seed": 3}
    ac4 = builtin_task("ac4")
    t = perturb_linear_task(ac4, PERTURBATION_SIZES["ac4"]["out_dist"], seed=4)
    assert np.linalg.norm(t.env.A - ac4.env.A) == pytest.approx(0.2, abs=1e-12)
    assert np.linalg.norm(t.env.B2 - ac4.env.B2) == pytest.approx(0.2, abs=1e-12)


def test_zero_perturbation_returns_nominal_matrices():
    he1 = builtin_task("he1")
    t = perturb_linear_task(he1, (0.0, 0.0), seed=1)
    np.testing.assert_array_equal(t.env.A, he1.env.A)
    assert t.provenance["type"] == "perturbed"


def test_perturbation_reconstructs_from_provenance():
    he1 = builtin_task("he1")
    t = linear_task_set(he1, "in_dist", 3, seed=5)[1]
    p = t.provenance
    again = perturb_linear_task(he1, (p["dA_norm"], p["dB2_norm"]), p["seed"])
    np.testing.assert_array_equal(again.env.A, t.env.A)


def test_perturbation_direction_is_rotation_invariant():
    # the normalized direction of a 2x2 Gaussian perturbation is uniform on the sphere,
    # so its first coordinate follows the Beta-type law of x1 on S^3: x1^2 ~ Beta(1/2, 3/2)
    nominal = TaskSpec(LinearSystemSpec(np.zeros((2, 2)), np.zeros((2, 1)), np.eye(2)),
                       RewardSpec.identity(2, 1), "z")
    x = np.array([perturb_linear_task(nominal, (1.0, 1.0), s).env.A[0, 0] for s in range(2000)])
    assert scipy.stats.kstest(x**2, scipy.stats.beta(0.5, 1.5).cdf).pvalue > 0.01


def test_cdr_out_of_distribution_tuples():
    assert out_dist_params("cdr", 0) == {"nu": 5e-4, "c": 0.25, "zeta": 0.15, "phi": 0.1}
    tasks = pde_task_set("cdr", "out_dist", 9, seed=0)
    got = [(t.env.nu, t.env.c, t.env.zeta, t.env.phi) for t in tasks]
    assert got == list(CDR_OOD)


def test_burgers_out_of_distribution_row_major():
    assert out_dist_params("burgers", 8) == {"nu": 1e-4, "phi": 0.07}
    assert out_dist_params("burgers", 1) == {"nu": 1e-3, "phi": 0.08}
    with pytest.raises(ContractError):
        out_dist_params("burgers", 9)
    with pytest.raises(ContractError):
        sample_pde_task("burgers", "out_dist")


def test_burgers_viscosity_log_uniform():
    rng = np.random.default_rng(0)
    log_nu = np.log10([sample_pde_params("burgers", rng)["nu"] for _ in range(10_000)])
    assert scipy.stats.kstest(log_nu, scipy.stats.uniform(-3, 2).cdf).pvalue > 0.01


def test_pde_sampling_ranges():
    for s in range(20):
        t = sample_pde_task("cdr", "train", seed=s)
        assert 1e-3 <= t.env.nu <= 1e-1 and 0 <= t.env.c <= 0.2
        assert -0.1 <= t.env.zeta <= 0.1 and 0.08 <= t.env.phi <= 0.12
        b = sample_pde_task("burgers", "in_dist", seed=s)
        assert 0.09 <= b.env.phi <= 0.16


def test_rollout_collect_contract():
    task = builtin_task("he1")
    pol = StaticPolicy(StaticGain.zeros(2, 1), 0.1)
    assert rollout_collect(task, pol, 0, seed=0) == []
    a = rollout_collect(task, pol, 3, seed=1)
    b = rollout_collect(task, pol, 3, seed=1)
    assert all(len(t) == task.n_steps for t in a)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.obs, y.obs)
        np.testing.assert_array_equal(x.act, y.act)


def test_rollout_collect_fails_when_everything_diverges():
    sys = LinearSystemSpec(A=1e150 * np.eye(1), B2=np.ones((1, 1)), C=np.eye(1), noise_cov=0.0)
    task = TaskSpec(sys, RewardSpec.identity(1, 1), "bad")
    with pytest.raises(SearchError):
        rollout_collect(task, StaticPolicy(StaticGain.zeros(1, 1)), 2, seed=0)


def _dataset(rng, n=3):
    task = builtin_task("he1")
    trajs = rollout_collect(task, StaticPolicy(StaticGain.zeros(2, 1), 0.1), n, seed=2)
    return Dataset([task], trajs, {task.task_id: NormalizationAnchors(-10.0, -20.0)}, "static", 2)


def test_dataset_round_trip(tmp_path, rng):
    ds = _dataset(rng)
    path = write_dataset(tmp_path / "d.djsonl", ds)
    back = read_dataset(path)
    assert back.behavior_policy == "static" and back.seed == 2
    assert back.anchors == ds.anchors
    for a, b in zip(ds.trajectories, back.trajectories):
        np.testing.assert_array_equal(a.obs, b.obs)
        np.testing.assert_array_equal(a.rew, b.rew)
    np.testing.assert_array_equal(back.tasks[0].env.A, ds.tasks[0].env.A)
    # byte-stable rewrite
    path2 = write_dataset(tmp_path / "e.djsonl", back)
    assert path.read_bytes() == path2.read_bytes()


def test_empty_dataset_round_trip(tmp_path):
    ds = Dataset([builtin_task("he1")], [])
    back = read_dataset(write_dataset(tmp_path / "d.djsonl", ds))
    assert back.trajectories == []
    assert len((tmp_path / "d.djsonl").read_text().splitlines()) == 1


def test_truncated_line_reports_line_number(tmp_path, rng):
    path = write_dataset(tmp_path / "d.djsonl", _dataset(rng))
    text = path.read_text()
    path.write_text(text[: len(text) - 40])
    with pytest.raises(DatasetError, match="line 4"):
        read_dataset(path)


def test_dimension_mismatch_rejected(tmp_path, rng):
    ds = _dataset(rng, 1)
    ds.trajectories.append(Trajectory(np.zeros((50, 3)), np.zeros((50, 2)), np.zeros(50), "he1-nominal"))
    path = write_dataset(tmp_path / "d.djsonl", ds)
    with pytest.raises(DatasetError, match="line 3"):
        read_dataset(path)


def test_duplicate_task_ids_rejected(tmp_path):
    t = builtin_task("he1")
    with pytest.raises(ContractError):
        write_dataset(tmp_path / "d.djsonl", Dataset([t, t], []))
