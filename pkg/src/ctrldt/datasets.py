"""Offline trajectory data: collection, windows, scores, task generation, storage."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .environments import Env
from .errors import ContractError, DatasetError, DivergenceError, SearchError
from .tasks import TaskSpec, make_pde_task

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DATASET_SUFFIX = ".djsonl"

#: Frobenius sizes of (dA, dB2) for in-distribution and out-of-distribution tasks.
PERTURBATION_SIZES = {
    "he1": {"in_dist": (0.05, 0.05), "out_dist": (0.15, 0.15)},
    "ac4": {"in_dist": (0.1, 0.1), "out_dist": (0.2, 0.2)},
    "cm3": {"in_dist": (0.1, 0.1), "out_dist": (0.15, 0.15)},
}

BURGERS_OOD_NU = (1e-3, 5.5e-4, 1e-4)
BURGERS_OOD_PHI = (0.09, 0.08, 0.07)
CDR_OOD = (
    (5e-4, 0.25, 0.15, 0.1),
    (5e-4, 0.25, 0.2, 0.1),
    (5e-4, 0.3, 0.15, 0.1),
    (5e-4, 0.3, 0.2, 0.1),
    (1e-4, 0.25, 0.15, 0.1),
    (1e-4, 0.25, 0.2, 0.1),
    (1e-4, 0.3, 0.15, 0.1),
    (1e-4, 0.3, 0.2, 0.1),
    (1e-4, 0.3, 0.2, 0.08),
)
N_OUT_DIST = 9


@dataclass
class Trajectory:
    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    task_id: str = ""

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        self.act = np.asarray(self.act, dtype=np.float64)
        self.rew = np.asarray(self.rew, dtype=np.float64).reshape(-1)
        if self.obs.ndim != 2 or self.act.ndim != 2:
            raise ContractError("obs and act must be (T+1, dim) arrays")
        if not len(self.obs) == len(self.act) == len(self.rew):
            raise ContractError(
                f"sequence lengths differ: obs {len(self.obs)}, act {len(self.act)}, rew {len(self.rew)}"
            )
        if not all(np.all(np.isfinite(x)) for x in (self.obs, self.act, self.rew)):
            raise ContractError("trajectory has non-finite entries")

    def __len__(self):
        return len(self.rew)

    @property
    def ret(self) -> float:
        return float(self.rew.sum())


@dataclass
class ContextWindow:
    rtg: np.ndarray
    obs: np.ndarray
    act: np.ndarray
    timesteps: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True)
class NormalizationAnchors:
    J_expert: float
    J_medium: float

    def __post_init__(self):
        if not self.J_expert > self.J_medium:
            raise ContractError(
                f"expert anchor {self.J_expert} must exceed medium anchor {self.J_medium}"
            )

    def to_dict(self) -> dict:
        return {"J_expert": self.J_expert, "J_medium": self.J_medium}

    @classmethod
    def from_dict(cls, d) -> "NormalizationAnchors":
        return cls(float(d["J_expert"]), float(d["J_medium"]))


def normalize_score(J, anchors: NormalizationAnchors):
    """Affine map sending the medium anchor to 0 and the expert anchor to 1."""
    return (np.asarray(J, dtype=float) - anchors.J_medium) / (anchors.J_expert - anchors.J_medium)


def reward_to_go(rew) -> np.ndarray:
    rew = np.asarray(rew, dtype=np.float64)
    if rew.size == 0:
        raise ContractError("reward sequence must be non-empty")
    return np.cumsum(rew[::-1])[::-1].copy()


def episode_seeds(seed, index: int):
    """(environment, policy) seed sequences of episode ``index``.

    ``seed`` is an int or a tuple of ints naming a stream.
    """
    base = [int(x) for x in np.atleast_1d(seed)]
    return (np.random.SeedSequence([*base, index, 0]),
            np.random.SeedSequence([*base, index, 1]))


def run_episode(task: TaskSpec, policy, env_seed, policy_seed) -> Trajectory:
    env = Env(task)
    obs = env.reset(env_seed)
    policy.reset(np.random.default_rng(policy_seed))
    O, A, R = [], [], []
    for _ in range(task.n_steps):
        a = np.asarray(policy.act(obs), dtype=np.float64).reshape(task.n_a)
        res = env.step(a)
        policy.observe(res.reward)
        O.append(obs)
        A.append(a)
        R.append(res.reward)
        obs = res.obs
    return Trajectory(np.array(O), np.array(A), np.array(R), task.task_id)


def rollout_collect(task: TaskSpec, policy, n_traj: int, seed: int,
                    max_discard_fraction: float = 0.5) -> list[Trajectory]:
    """Collect ``n_traj`` full-length episodes; diverged episodes are resampled."""
    trajs: list[Trajectory] = []
    discarded = 0
    index = 0
    while len(trajs) < n_traj:
        env_seed, pol_seed = episode_seeds(seed, index)
        index += 1
        try:
            trajs.append(run_episode(task, policy, env_seed, pol_seed))
        except DivergenceError as err:
            discarded += 1
            log.debug("episode %d of %s diverged at step %d", index - 1, task.task_id, err.step)
            if discarded > max_discard_fraction * n_traj:
                raise SearchError(
                    f"{discarded} of {index} episodes diverged on {task.task_id}; behaviour policy unusable"
                ) from err
    if discarded:
        log.warning("discarded %d diverged episodes on %s", discarded, task.task_id)
    return trajs


# --- windows ---------------------------------------------------------------------

def window_arrays(trajs, K: int) -> dict:
    """Stack every length-K window of every trajectory into (N, K, ...) arrays.

    Window t holds steps max(0, t-K+1)..t, left-padded with zeros; timesteps
    are the relative positions 0..K-1.
    """
    if K < 1:
        raise ContractError("context length K must be >= 1")
    out = {"rtg": [], "obs": [], "act": [], "mask": []}
    for tr in trajs:
        L = len(tr)
        idx = np.arange(L)[:, None] - K + 1 + np.arange(K)[None, :]
        mask = idx >= 0
        safe = np.clip(idx, 0, None)
        rtg = reward_to_go(tr.rew)
        out["rtg"].append(np.where(mask, rtg[safe], 0.0))
        out["obs"].append(np.where(mask[..., None], tr.obs[safe], 0.0))
        out["act"].append(np.where(mask[..., None], tr.act[safe], 0.0))
        out["mask"].append(mask)
    if not out["mask"]:
        raise ContractError("no trajectories to window")
    arrays = {k: np.concatenate(v) for k, v in out.items()}
    arrays["timesteps"] = np.broadcast_to(np.arange(K), arrays["mask"].shape).copy()
    return arrays


def make_windows(traj: Trajectory, K: int) -> list[ContextWindow]:
    arr = window_arrays([traj], K)
    return [
        ContextWindow(arr["rtg"][i], arr["obs"][i], arr["act"][i], arr["timesteps"][i], arr["mask"][i])
        for i in range(len(traj))
    ]


# --- task generation ---------------------------------------------------------------

def perturb_linear_task(nominal: TaskSpec, sizes, seed: int, task_id: str | None = None) -> TaskSpec:
    """Add Gaussian dA, dB2 rescaled to the given Frobenius norms."""
    if not nominal.is_linear:
        raise ContractError("only linear tasks can be perturbed by matrix noise")
    size_A, size_B = (float(s) for s in sizes)
    rng = np.random.default_rng(seed)
    sys = nominal.env
    dA = rng.standard_normal(sys.A.shape)
    dB = rng.standard_normal(sys.B2.shape)
    dA = dA * (size_A / np.linalg.norm(dA)) if size_A > 0 else np.zeros_like(dA)
    dB = dB * (size_B / np.linalg.norm(dB)) if size_B > 0 else np.zeros_like(dB)
    env = type(sys)(A=sys.A + dA, B2=sys.B2 + dB, C=sys.C, noise_cov=sys.noise_cov,
                    n_steps=sys.n_steps, init_std=sys.init_std)
    prov = {"type": "perturbed", "nominal": nominal.task_id, "dA_norm": size_A,
            "dB2_norm": size_B, "seed": int(seed)}
    return TaskSpec(env=env, reward=nominal.reward, name=nominal.name,
                    task_id=task_id or f"{nominal.name}-p{size_A:g}-{seed}", provenance=prov)


def sample_pde_params(kind: str, rng: np.random.Generator) -> dict:
    nu = 10 ** rng.uniform(-3, -1)
    if kind == "burgers":
        return {"nu": nu, "phi": rng.uniform(0.09, 0.16)}
    if kind == "cdr":
        return {"nu": nu, "c": rng.uniform(0.0, 0.2), "zeta": rng.uniform(-0.1, 0.1),
                "phi": rng.uniform(0.08, 0.12)}
    raise ContractError(f"unknown PDE kind {kind!r}")


def out_dist_params(kind: str, index: int) -> dict:
    if not 0 <= index < N_OUT_DIST:
        raise ContractError(f"out-of-distribution index must be in [0, {N_OUT_DIST}), got {index}")
    if kind == "burgers":
        return {"nu": BURGERS_OOD_NU[index // 3], "phi": BURGERS_OOD_PHI[index % 3]}
    if kind == "cdr":
        nu, c, zeta, phi = CDR_OOD[index]
        return {"nu": nu, "c": c, "zeta": zeta, "phi": phi}
    raise ContractError(f"unknown PDE kind {kind!r}")


def sample_pde_task(env_kind: str, mode: str, seed: int = 0, index: int | None = None) -> TaskSpec:
    """Training / in-distribution draw, or the ``index``-th fixed out-of-distribution task."""
    if mode == "out_dist":
        if index is None:
            raise ContractError("out_dist mode needs an index")
        params = out_dist_params(env_kind, index)
        prov = {"type": "sampled", "mode": mode, "index": int(index), "params": params}
        return make_pde_task(env_kind, params, f"{env_kind}-out-{index}", prov)
    if mode not in ("train", "in_dist"):
        raise ContractError(f"unknown mode {mode!r}")
    params = sample_pde_params(env_kind, np.random.default_rng(seed))
    prov = {"type": "sampled", "mode": mode, "seed": int(seed), "params": params}
    return make_pde_task(env_kind, params, f"{env_kind}-{mode}-{seed}", prov)


def linear_task_set(nominal: TaskSpec, mode: str, count: int, seed: int) -> list[TaskSpec]:
    sizes = PERTURBATION_SIZES[nominal.name]["out_dist" if mode == "out_dist" else "in_dist"]
    seeds = np.random.SeedSequence([seed, ("train", "in_dist", "out_dist").index(mode)])
    task_seeds = [int(s.generate_state(1)[0]) for s in seeds.spawn(count)]
    return [perturb_linear_task(nominal, sizes, s, task_id=f"{nominal.name}-{mode}-{i}")
            for i, s in enumerate(task_seeds)]


def pde_task_set(kind: str, mode: str, count: int, seed: int) -> list[TaskSpec]:
    if mode == "out_dist":
        return [sample_pde_task(kind, mode, index=i) for i in range(min(count, N_OUT_DIST))]
    seeds = np.random.SeedSequence([seed, ("train", "in_dist").index(mode)])
    return [sample_pde_task(kind, mode, int(s.generate_state(1)[0])) for s in seeds.spawn(count)]


# --- storage -------------------------------------------------------------------

@dataclass
class Dataset:
    tasks: list[TaskSpec]
    trajectories: list[Trajectory]
    anchors: dict = field(default_factory=dict)
    behavior_policy: str = ""
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def task(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)


def _num(x: float) -> str:
    return format(float(x), ".17g")


def _vec(v) -> str:
    return "[" + ",".join(_num(x) for x in v) + "]"


def _mat(m) -> str:
    return "[" + ",".join(_vec(r) for r in m) + "]"


def write_dataset(path, dataset: Dataset) -> Path:
    path = Path(path)
    ids = [t.task_id for t in dataset.tasks]
    if len(set(ids)) != len(ids):
        raise ContractError("task ids must be unique within a dataset")
    header = {
        "format_version": FORMAT_VERSION,
        "tasks": [t.to_dict() for t in dataset.tasks],
        "anchors": {k: a.to_dict() for k, a in dataset.anchors.items()},
        "behavior_policy": dataset.behavior_policy,
        "seed": dataset.seed,
        "meta": dataset.meta,
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for tr in dataset.trajectories:
            fh.write(
                '{"task_id":' + json.dumps(tr.task_id)
                + ',"obs":' + _mat(tr.obs)
                + ',"act":' + _mat(tr.act)
                + ',"rew":' + _vec(tr.rew) + "}\n"
            )
    return path


def read_dataset(path) -> Dataset:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetError("empty file: missing header", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise DatasetError(f"malformed header: {err.msg}", line=1) from err
    if header.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported format_version {header.get('format_version')!r}", line=1)
    tasks = [TaskSpec.from_dict(d) for d in header["tasks"]]
    by_id = {t.task_id: t for t in tasks}
    trajs = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as err:
            raise DatasetError(f"malformed trajectory record: {err.msg}", line=lineno) from err
        task = by_id.get(rec.get("task_id"))
        if task is None:
            raise DatasetError(f"unknown task_id {rec.get('task_id')!r}", line=lineno)
        try:
            tr = Trajectory(rec["obs"], rec["act"], rec["rew"], rec["task_id"])
        except (ContractError, KeyError, ValueError) as err:
            raise DatasetError(f"invalid trajectory: {err}", line=lineno) from err
        if tr.obs.shape[1] != task.n_o or tr.act.shape[1] != task.n_a:
            raise DatasetError(
                f"trajectory dims (n_o={tr.obs.shape[1]}, n_a={tr.act.shape[1]}) do not match "
                f"task {task.task_id} (n_o={task.n_o}, n_a={task.n_a})",
                line=lineno,
            )
        trajs.append(tr)
    anchors = {k: NormalizationAnchors.from_dict(v) for k, v in header.get("anchors", {}).items()}
    return Dataset(tasks=tasks, trajectories=trajs, anchors=anchors,
                   behavior_policy=header.get("behavior_policy", ""), seed=header.get("seed"),
                   meta=header.get("meta", {}))
