"""Experiment drivers: offline training, return-prompted rollouts, k-shot
adaptation, the behaviour-cloning baseline and the H2/H-infinity comparison."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .classical import (HinfInfeasible, HinfPolicy, SearchConfig, SearchResult, StaticGain,
                        StaticPolicy, search_static_gain, solve_hinf_central)
from .datasets import (NormalizationAnchors, episode_seeds, linear_task_set,
                       normalize_score, pde_task_set, rollout_collect, run_episode, window_arrays)
from .environments import Env
from .errors import ContractError, DivergenceError, SearchError, TrainingAborted
from .policy import (AdamHyper, AdamState, Batch, Checkpoint, ModelConfig, forward, grad,
                     init_adapters, init_params, optimizer_step)
from .tasks import TaskSpec

log = logging.getLogger(__name__)

GAMMA_GRID = (0.5, 1, 2, 3, 4, 5, 10, 20, 50, 100, 200, 500, 1000)
SCORE_CAP = (-1.0, 2.0)
ANCHOR_EPISODES = 100
EVAL_EPISODES = 20
K_SHOT_EPOCHS = 50
#: Gaussian action noise of the behaviour policies; the early-stopped one explores more.
DEMO_ACTION_STD = {"expert": 0.1, "medium": 0.3}

# seed-stream tags, combined with the run seed as (seed, tag)
STREAM_EXPERT_DATA, STREAM_MEDIUM_DATA, STREAM_EVAL, STREAM_DEMOS = 1, 2, 3, 4


def cap_scores(scores, cap=SCORE_CAP) -> np.ndarray:
    low, high = cap
    return np.clip(np.asarray(scores, dtype=float), low, high)


def _stream(seed, tag: int) -> tuple:
    return (*[int(x) for x in np.atleast_1d(seed)], tag)


# --- configs and reports ----------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    lr: float = 1e-4
    weight_decay: float = 1e-5
    trainable_set: str = "all"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")
        if self.trainable_set not in ("all", "adapters_only"):
            raise ContractError(f"unknown trainable_set {self.trainable_set!r}")


@dataclass
class EvalConfig:
    episodes: int = EVAL_EPISODES
    target_return: float | None = None
    seed: int | tuple = 0
    score_cap: tuple | None = None

    def __post_init__(self):
        if self.episodes < 1:
            raise ContractError("episodes must be >= 1")
        if self.score_cap is not None:
            self.score_cap = tuple(float(x) for x in self.score_cap)
            if not self.score_cap[0] < self.score_cap[1]:
                raise ContractError("score cap needs low < high")


@dataclass
class EvalReport:
    task_id: str
    protocol: str
    returns: list
    faulted: list
    anchors: NormalizationAnchors | None = None
    score_cap: tuple | None = None
    target_return: float | None = None
    provenance: dict = field(default_factory=dict)
    prompts: np.ndarray | None = None
    rewards: np.ndarray | None = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def std(self) -> float:
        return float(np.std(self.returns))

    @property
    def normalized(self) -> np.ndarray | None:
        if self.anchors is None:
            return None
        s = normalize_score(self.returns, self.anchors)
        return cap_scores(s, self.score_cap) if self.score_cap else np.asarray(s, dtype=float)

    def summary(self) -> dict:
        out = {"task_id": self.task_id, "protocol": self.protocol, "mean": self.mean,
               "std": self.std, "episodes": len(self.returns), "faulted": int(sum(self.faulted))}
        n = self.normalized
        if n is not None:
            out["normalized_mean"] = float(n.mean())
            out["normalized_std"] = float(n.std())
        return out

    def to_dict(self) -> dict:
        d = self.summary()
        d.update(returns=[float(r) for r in self.returns], faulted=[bool(f) for f in self.faulted],
                 target_return=self.target_return, provenance=self.provenance,
                 anchors=self.anchors.to_dict() if self.anchors else None,
                 score_cap=list(self.score_cap) if self.score_cap else None)
        if self.normalized is not None:
            d["normalized"] = [float(x) for x in self.normalized]
        return d


# --- demonstrators and anchors -------------------------------------------------------

@dataclass
class Demonstrators:
    expert: StaticGain
    medium: StaticGain
    expert_std: float = DEMO_ACTION_STD["expert"]
    medium_std: float = DEMO_ACTION_STD["medium"]
    search: SearchResult | None = None

    def policy(self, kind: str) -> StaticPolicy:
        if kind == "expert":
            return StaticPolicy(self.expert, self.expert_std)
        if kind == "medium":
            return StaticPolicy(self.medium, self.medium_std)
        raise ContractError(f"unknown demonstrator {kind!r}")

    def to_dict(self) -> dict:
        return {"expert": self.expert.to_dict(), "medium": self.medium.to_dict(),
                "expert_std": self.expert_std, "medium_std": self.medium_std}

    @classmethod
    def from_dict(cls, d) -> "Demonstrators":
        return cls(StaticGain.from_dict(d["expert"]), StaticGain.from_dict(d["medium"]),
                   d.get("expert_std", DEMO_ACTION_STD["expert"]),
                   d.get("medium_std", DEMO_ACTION_STD["medium"]))


def fit_demonstrators(task: TaskSpec, search: SearchConfig | None = None,
                      expert_std: float | None = None, medium_std: float | None = None) -> Demonstrators:
    res = search_static_gain(task, search)
    return Demonstrators(
        res.expert, res.medium,
        DEMO_ACTION_STD["expert"] if expert_std is None else expert_std,
        DEMO_ACTION_STD["medium"] if medium_std is None else medium_std,
        res,
    )


def demonstrator_returns(task, demos: Demonstrators, kind: str, episodes: int, seed) -> np.ndarray:
    """Returns on the evaluation stream; diverged episodes are kept at their partial return."""
    out = []
    for e in range(episodes):
        env_seed, pol_seed = episode_seeds(seed, e)
        out.append(_episode_return(task, demos.policy(kind), env_seed, pol_seed))
    return np.array(out)


def _episode_return(task, policy, env_seed, pol_seed) -> float:
    try:
        return run_episode(task, policy, env_seed, pol_seed).ret
    except DivergenceError:
        env = Env(task)
        obs = env.reset(env_seed)
        policy.reset(np.random.default_rng(pol_seed))
        total = 0.0
        try:
            for _ in range(task.n_steps):
                res = env.step(policy.act(obs))
                total += res.reward
                obs = res.obs
        except DivergenceError:
            pass
        return total


def compute_anchors(task, demos: Demonstrators, episodes: int = ANCHOR_EPISODES, seed=0):
    """Anchors are mean demonstrator returns on the evaluation stream ``(seed, STREAM_EVAL)``.

    Sharing the stream with later evaluations pairs their episodes with the
    first anchor episodes (common random numbers).
    """
    stream = _stream(seed, STREAM_EVAL)
    J_e = demonstrator_returns(task, demos, "expert", episodes, stream)
    J_m = demonstrator_returns(task, demos, "medium", episodes, stream)
    return NormalizationAnchors(float(J_e.mean()), float(J_m.mean())), J_e, J_m


# --- training -------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "lr", "wall_time"])
        for step, value, lr, wall in self.log:
            w.writerow([step, format(value, ".17g"), format(lr, ".17g"), format(wall, ".6f")])
        return buf.getvalue()

    @property
    def losses(self) -> list[float]:
        return [row[1] for row in self.log]


def _dropout_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def _torch_windows(arrays: dict, dtype=torch.float32) -> dict:
    return {
        "rtg": torch.as_tensor(arrays["rtg"], dtype=dtype),
        "obs": torch.as_tensor(arrays["obs"], dtype=dtype),
        "act": torch.as_tensor(arrays["act"], dtype=dtype),
        "timesteps": torch.as_tensor(arrays["timesteps"], dtype=torch.long),
        "mask": torch.as_tensor(arrays["mask"], dtype=torch.bool),
    }


def _train_loop(tensors: dict, n: int, grad_fn, tc: TrainConfig, snapshot):
    """Shared minibatch loop; ``grad_fn(tensors, index, step)`` -> (loss, grads)."""
    rng = np.random.default_rng(tc.seed)
    hp = AdamHyper(lr=tc.lr, weight_decay=tc.weight_decay)
    state = AdamState.zeros_like(tensors)
    rows, step, t0 = [], 0, time.perf_counter()
    for _ in range(tc.epochs):
        perm = rng.permutation(n)
        for i in range(0, n, tc.batch_size):
            idx = torch.as_tensor(perm[i: i + tc.batch_size])
            prev = {k: v.clone() for k, v in tensors.items()}
            try:
                value, grads = grad_fn(tensors, idx, step)
            except FloatingPointError as err:
                log.error("training aborted at step %d: %s", step, err)
                raise TrainingAborted(step, snapshot(prev, state, step)) from err
            optimizer_step(tensors, grads, state, hp)
            step += 1
            rows.append((step, value, tc.lr, time.perf_counter() - t0))
    return state, rows


def check_compatible(cfg: ModelConfig, task: TaskSpec) -> None:
    if cfg.n_o != task.n_o or cfg.n_a != task.n_a:
        raise ContractError(
            f"checkpoint expects n_o={cfg.n_o}, n_a={cfg.n_a} but task {task.task_id} "
            f"has n_o={task.n_o}, n_a={task.n_a}"
        )


def _check_data(trajs, n_o, n_a):
    if not trajs:
        raise ContractError("training needs at least one trajectory")
    for tr in trajs:
        if tr.obs.shape[1] != n_o or tr.act.shape[1] != n_a:
            raise ContractError(
                f"trajectory of {tr.task_id} has (n_o={tr.obs.shape[1]}, n_a={tr.act.shape[1]}); "
                f"model expects (n_o={n_o}, n_a={n_a})"
            )


def train_offline(trajs, model_cfg: ModelConfig, tc: TrainConfig | None = None,
                  init: Checkpoint | None = None) -> TrainResult:
    """Train on every length-K window of ``trajs``.

    ``init`` continues from an existing checkpoint (its adapters, if any, are
    the trainable set under ``adapters_only``).
    """
    tc = tc or TrainConfig()
    cfg = init.config if init is not None else model_cfg
    _check_data(trajs, cfg.n_o, cfg.n_a)
    data = _torch_windows(window_arrays(trajs, cfg.K))
    if init is not None:
        params = {k: v.clone() for k, v in init.params.items()}
        adapters = {k: v.clone() for k, v in init.adapters.items()} if init.adapters else None
    else:
        params, adapters = init_params(cfg), None
    if tc.trainable_set == "adapters_only":
        if adapters is None:
            raise ContractError("adapters_only training needs a checkpoint with adapters")
        trainable = adapters
    else:
        trainable = params

    def grad_fn(tensors, idx, step):
        batch = Batch(**{k: v[idx] for k, v in data.items()})
        return grad(params, adapters, batch, cfg, tc.trainable_set, train_mode=True,
                    dropout_seed=_dropout_seed(tc.seed, step))

    group = "adapters" if tc.trainable_set == "adapters_only" else "params"

    def snapshot(prev, state, step):
        p = prev if group == "params" else params
        a = prev if group == "adapters" else adapters
        return Checkpoint(cfg, p, a, None, group, {"aborted_at": step})

    state, rows = _train_loop(trainable, len(data["mask"]), grad_fn, tc, snapshot)
    meta = {"train": asdict(tc), "steps": len(rows), "n_windows": int(len(data["mask"])),
            "n_trajectories": len(trajs)}
    if init is not None:
        meta["base"] = init.meta
    return TrainResult(Checkpoint(cfg, params, adapters, state, group, meta), rows)


def adapt_k_shot(ck: Checkpoint, demos, tc: TrainConfig | None = None, adapt_all: bool = False,
                 adapter_seed: int = 0) -> TrainResult:
    """Fit fresh low-rank adapters on ``demos`` with the base frozen.

    ``adapt_all`` instead fine-tunes every base tensor (no adapters).
    """
    if len(demos) < 1:
        raise ContractError("k-shot adaptation needs k >= 1 demonstrations")
    tc = tc or TrainConfig(epochs=K_SHOT_EPOCHS, lr=1e-3)
    if adapt_all:
        base = Checkpoint(ck.config, ck.params, None, None, None, ck.meta)
        return train_offline(demos, ck.config, replace(tc, trainable_set="all"), init=base)
    base = Checkpoint(ck.config, ck.params, init_adapters(ck.config, adapter_seed), None, None, ck.meta)
    res = train_offline(demos, ck.config, replace(tc, trainable_set="adapters_only"), init=base)
    # hand back the caller's base tensors themselves, untouched
    res.checkpoint.params = ck.params
    res.checkpoint.meta["k"] = len(demos)
    return res


# --- behaviour cloning ----------------------------------------------------------------

@dataclass
class BCModel:
    params: dict
    n_o: int
    n_a: int
    width: int

    def predict(self, obs: torch.Tensor) -> torch.Tensor:
        x = obs.to(self.params["bc.0.weight"].dtype)
        for i in range(4):
            x = F.linear(x, self.params[f"bc.{i}.weight"], self.params[f"bc.{i}.bias"])
            if i < 3:
                x = F.gelu(x)
        return x

    def act(self, obs) -> np.ndarray:
        with torch.no_grad():
            return self.predict(torch.as_tensor(np.asarray(obs), dtype=torch.float32)).numpy().astype(float)

    def to_dict(self) -> dict:
        return {"n_o": self.n_o, "n_a": self.n_a, "width": self.width,
                "params": {k: v.tolist() for k, v in self.params.items()}}

    @classmethod
    def from_dict(cls, d) -> "BCModel":
        params = {k: torch.tensor(v, dtype=torch.float32) for k, v in d["params"].items()}
        return cls(params, d["n_o"], d["n_a"], d["width"])


def init_bc(n_o: int, n_a: int, width: int, seed: int = 0) -> BCModel:
    gen = torch.Generator().manual_seed(seed)
    dims = [n_o, width, width, width, n_a]
    params = {}
    for i in range(4):
        w = torch.randn((dims[i + 1], dims[i]), generator=gen, dtype=torch.float64) * 0.02
        params[f"bc.{i}.weight"] = w.float()
        params[f"bc.{i}.bias"] = torch.zeros(dims[i + 1])
    return BCModel(params, n_o, n_a, width)


def train_bc(trajs, width: int, tc: TrainConfig | None = None) -> tuple[BCModel, list]:
    """Regress a_t on o_t alone (no return channel)."""
    tc = tc or TrainConfig()
    n_o, n_a = trajs[0].obs.shape[1], trajs[0].act.shape[1]
    _check_data(trajs, n_o, n_a)
    obs = torch.as_tensor(np.concatenate([t.obs for t in trajs]), dtype=torch.float32)
    act = torch.as_tensor(np.concatenate([t.act for t in trajs]), dtype=torch.float32)
    model = init_bc(n_o, n_a, width, tc.seed)

    def grad_fn(tensors, idx, step):
        leaves = {k: v.detach().requires_grad_(True) for k, v in tensors.items()}
        with torch.enable_grad():
            err = BCModel(leaves, n_o, n_a, width).predict(obs[idx]) - act[idx]
            value = (err * err).mean()
            if not torch.isfinite(value):
                raise FloatingPointError("non-finite BC loss")
            gs = torch.autograd.grad(value, list(leaves.values()))
        return float(value.detach()), dict(zip(leaves, gs))

    _, rows = _train_loop(model.params, len(obs), grad_fn, tc,
                          lambda prev, state, step: BCModel(prev, n_o, n_a, width))
    return model, rows


# --- rollouts ---------------------------------------------------------------------------

def rollout_windows(task: TaskSpec, act_fn, K: int, ec: EvalConfig, protocol: str,
                    anchors=None) -> EvalReport:
    """Batched rollouts of a window-conditioned policy.

    ``act_fn(window: dict, t)`` maps the (E, K, ...) window arrays to (E, n_a)
    actions.  At step t the window holds positions max(0, t-K+1)..t; the
    current action slot is zero (it is never visible to the current
    observation token).  Prompts follow R_{t+1} = R_t - r_t.
    """
    E, T = ec.episodes, task.n_steps
    target = 0.0 if ec.target_return is None else float(ec.target_return)
    envs = [Env(task) for _ in range(E)]
    obs0 = [env.reset(episode_seeds(ec.seed, e)[0]) for e, env in enumerate(envs)]
    R = np.zeros((E, T))
    O = np.zeros((E, T, task.n_o))
    A = np.zeros((E, T, task.n_a))
    rew = np.zeros((E, T))
    alive = np.ones(E, dtype=bool)
    prompt = np.full(E, target)
    current = np.array(obs0)
    for t in range(T):
        R[:, t] = prompt
        O[:, t] = current
        lo = max(0, t - K + 1)
        n = t - lo + 1
        win = {
            "rtg": np.zeros((E, K)), "obs": np.zeros((E, K, task.n_o)),
            "act": np.zeros((E, K, task.n_a)), "mask": np.zeros((E, K), dtype=bool),
            "timesteps": np.broadcast_to(np.arange(K), (E, K)).copy(),
        }
        win["rtg"][:, K - n:] = R[:, lo: t + 1]
        win["obs"][:, K - n:] = O[:, lo: t + 1]
        win["act"][:, K - n: K - 1] = A[:, lo: t]
        win["mask"][:, K - n:] = True
        actions = np.asarray(act_fn(win, t), dtype=float).reshape(E, task.n_a)
        A[:, t] = actions
        for e in np.flatnonzero(alive):
            try:
                res = envs[e].step(actions[e])
            except DivergenceError as err:
                log.warning("episode %d on %s diverged at step %d", e, task.task_id, err.step)
                alive[e] = False
                continue
            rew[e, t] = res.reward
            current[e] = res.obs
        prompt = prompt - rew[:, t]
    return EvalReport(task.task_id, protocol, rew.sum(axis=1).tolist(), (~alive).tolist(),
                      anchors, ec.score_cap, ec.target_return, dict(task.provenance),
                      prompts=R, rewards=rew)


def dt_act_fn(ck: Checkpoint):
    cfg = ck.config

    def act(win, t):
        batch = Batch.from_arrays(win)
        with torch.no_grad():
            pred = forward(ck.params, ck.adapters, batch, cfg, train_mode=False)
        return pred[:, -1].double().numpy()

    return act


def rollout_dt(ck: Checkpoint, task: TaskSpec, ec: EvalConfig, anchors=None,
               protocol: str = "single") -> EvalReport:
    check_compatible(ck.config, task)
    if ec.target_return is None:
        raise ContractError("rollout_dt needs a target return")
    return rollout_windows(task, dt_act_fn(ck), ck.config.K, ec, protocol, anchors)


def rollout_bc(model: BCModel, task: TaskSpec, ec: EvalConfig, anchors=None) -> EvalReport:
    if model.n_o != task.n_o or model.n_a != task.n_a:
        raise ContractError(f"BC model dims (n_o={model.n_o}, n_a={model.n_a}) do not match task {task.task_id}")
    return rollout_windows(task, lambda win, t: model.act(win["obs"][:, -1]), 1, ec, "bc", anchors)


def rollout_policy(task: TaskSpec, policy, ec: EvalConfig, protocol: str, anchors=None) -> EvalReport:
    """Evaluate a stateful :class:`~ctrldt.classical.Policy` on the evaluation stream."""
    returns, faulted = [], []
    for e in range(ec.episodes):
        env_seed, pol_seed = episode_seeds(ec.seed, e)
        try:
            returns.append(run_episode(task, policy, env_seed, pol_seed).ret)
            faulted.append(False)
        except DivergenceError:
            returns.append(_episode_return(task, policy, env_seed, pol_seed))
            faulted.append(True)
    return EvalReport(task.task_id, protocol, returns, faulted, anchors, ec.score_cap,
                      None, dict(task.provenance))


# --- single task -------------------------------------------------------------------------

@dataclass
class SingleTaskConfig:
    n_traj: int = 1000
    anchor_episodes: int = ANCHOR_EPISODES
    eval_episodes: int = EVAL_EPISODES
    seed: int = 0
    target_return: float | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    bc_train: TrainConfig | None = None
    search: SearchConfig = field(default_factory=SearchConfig)


def dataset_target(trajs) -> float:
    """Default return prompt: the best episode return in the training data."""
    return float(max(t.ret for t in trajs))


def return_scale(trajs) -> float:
    return float(max(1.0, abs(np.mean([t.ret for t in trajs]))))


def run_single_task(task: TaskSpec, model_cfg: ModelConfig, cfg: SingleTaskConfig | None = None,
                    demos: Demonstrators | None = None) -> dict:
    """Expert and medium datasets, each scored for demonstrator, BC and DT."""
    cfg = cfg or SingleTaskConfig()
    demos = demos or fit_demonstrators(task, cfg.search)
    anchors, _, _ = compute_anchors(task, demos, cfg.anchor_episodes, cfg.seed)
    log.info("anchors for %s: expert %.4g, medium %.4g", task.task_id, anchors.J_expert, anchors.J_medium)
    eval_stream = _stream(cfg.seed, STREAM_EVAL)
    rows, evals, artifacts = [], [], {}
    for kind, tag in (("expert", STREAM_EXPERT_DATA), ("medium", STREAM_MEDIUM_DATA)):
        trajs = rollout_collect(task, demos.policy(kind), cfg.n_traj, _stream(cfg.seed, tag))
        target = cfg.target_return if cfg.target_return is not None else dataset_target(trajs)
        mcfg = replace(model_cfg, rtg_scale=return_scale(trajs))
        dt = train_offline(trajs, mcfg, cfg.train)
        bc, bc_log = train_bc(trajs, model_cfg.d_model, cfg.bc_train or cfg.train)
        ec = EvalConfig(cfg.eval_episodes, target, eval_stream)
        reports = {
            "demonstrator": rollout_policy(task, demos.policy(kind), ec, "demonstrator", anchors),
            "bc": rollout_bc(bc, task, ec, anchors),
            "dt": rollout_dt(dt.checkpoint, task, ec, anchors),
        }
        for method, rep in reports.items():
            s = rep.summary()
            rows.append({"dataset": kind, "method": method, "normalized_mean": s["normalized_mean"],
                         "normalized_std": s["normalized_std"], "return_mean": s["mean"],
                         "return_std": s["std"]})
            evals.append({"dataset": kind, "method": method, **rep.to_dict()})
        artifacts[kind] = {"trajectories": trajs, "dt": dt, "bc": bc, "bc_log": bc_log,
                           "target_return": target}
    return {
        "protocol": "single",
        "task": task.to_dict(),
        "anchors": anchors.to_dict(),
        "demonstrators": demos.to_dict(),
        "rows": rows,
        "evaluations": evals,
        "_artifacts": artifacts,
    }


def table1_csv(report: dict) -> str:
    methods = ["demonstrator", "bc", "dt"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset"] + methods)
    grid = {(r["dataset"], r["method"]): r for r in report["rows"]}
    for ds in ("expert", "medium"):
        w.writerow([ds] + [f"{grid[ds, m]['normalized_mean']:.4f} ± {grid[ds, m]['normalized_std']:.4f}"
                           for m in methods])
    return buf.getvalue()


# --- multi-task --------------------------------------------------------------------------

def _fit_and_anchor(args):
    task, search, anchor_episodes, seed, k = args
    demos = fit_demonstrators(task, search)
    anchors, _, _ = compute_anchors(task, demos, anchor_episodes, seed)
    shots = rollout_collect(task, demos.policy("expert"), k, _stream(seed, STREAM_DEMOS)) if k else []
    return demos, anchors, shots


def _fit_expert_data(args):
    task, search, n_traj, seed = args
    demos = fit_demonstrators(task, search)
    return demos, rollout_collect(task, demos.policy("expert"), n_traj, _stream(seed, STREAM_EXPERT_DATA))


def _pmap(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


@dataclass
class MultiTaskConfig:
    n_train: int = 30
    n_in: int = 9
    n_out: int = 9
    traj_per_task: int = 100
    k: int = 10
    anchor_episodes: int = ANCHOR_EPISODES
    eval_episodes: int = EVAL_EPISODES
    seed: int = 0
    target_return: float | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=K_SHOT_EPOCHS, lr=1e-3))
    adapt_all: bool = False
    search: SearchConfig = field(default_factory=SearchConfig)
    jobs: int = 1


def make_task_sets(nominal_or_kind, cfg: MultiTaskConfig):
    if isinstance(nominal_or_kind, TaskSpec):
        make = lambda mode, n: linear_task_set(nominal_or_kind, mode, n, cfg.seed)  # noqa: E731
    else:
        make = lambda mode, n: pde_task_set(nominal_or_kind, mode, n, cfg.seed)  # noqa: E731
    return make("train", cfg.n_train), make("in_dist", cfg.n_in), make("out_dist", cfg.n_out)


def run_multitask(nominal_or_kind, model_cfg: ModelConfig, cfg: MultiTaskConfig | None = None) -> dict:
    """Pool expert data from the training tasks, then score zero- and k-shot on test tasks."""
    cfg = cfg or MultiTaskConfig()
    train_tasks, in_tasks, out_tasks = make_task_sets(nominal_or_kind, cfg)
    fitted = _pmap(_fit_expert_data, [(t, cfg.search, cfg.traj_per_task, cfg.seed) for t in train_tasks],
                   cfg.jobs)
    pooled = [tr for _, trajs in fitted for tr in trajs]
    tests = [("in", t) for t in in_tasks] + [("out", t) for t in out_tasks]
    prepared = _pmap(_fit_and_anchor, [(t, cfg.search, cfg.anchor_episodes, cfg.seed, cfg.k)
                                       for _, t in tests], cfg.jobs)
    target = cfg.target_return if cfg.target_return is not None else dataset_target(pooled)
    mcfg = replace(model_cfg, rtg_scale=return_scale(pooled))
    base = train_offline(pooled, mcfg, cfg.train)
    ck = base.checkpoint
    per_task = []
    for (dist, task), (demos, anchors, shots) in zip(tests, prepared):
        ec = EvalConfig(cfg.eval_episodes, target, _stream(cfg.seed, STREAM_EVAL))
        zero = rollout_dt(ck, task, ec, anchors, "zero_shot")
        entry = {"distribution": dist, "task_id": task.task_id, "provenance": task.provenance,
                 "anchors": anchors.to_dict(), "zero_shot": zero.to_dict()}
        if cfg.k:
            adapted = adapt_k_shot(ck, shots, cfg.adapt, cfg.adapt_all, adapter_seed=cfg.seed)
            k_rep = rollout_dt(adapted.checkpoint, task, ec, anchors, f"k_shot({cfg.k})")
            entry["k_shot"] = k_rep.to_dict()
        per_task.append(entry)
    cells = {}
    for dist in ("in", "out"):
        for shot in ("zero_shot", "k_shot"):
            vals = [e[shot]["normalized_mean"] for e in per_task if e["distribution"] == dist and shot in e]
            if vals:
                cells[f"{dist}/{shot}"] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)),
                                           "n_tasks": len(vals)}
    return {"protocol": "multitask", "k": cfg.k, "target_return": target, "cells": cells,
            "per_task": per_task, "train_tasks": [t.to_dict() for t in train_tasks],
            "_artifacts": {"base": base, "pooled": pooled}}


def table2_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["distribution", "zero_shot", f"{report['k']}_shot"])
    for dist in ("in", "out"):
        row = [dist]
        for shot in ("zero_shot", "k_shot"):
            c = report["cells"].get(f"{dist}/{shot}")
            row.append(f"{c['mean']:.4f} ± {c['std']:.4f}" if c else "")
        w.writerow(row)
    return buf.getvalue()


# --- H-infinity comparison -----------------------------------------------------------------

def select_gamma(grid_scores: dict) -> float:
    """Feasible gamma with the highest mean in-distribution score (ties: smallest gamma)."""
    feasible = {g: s for g, s in grid_scores.items() if s is not None}
    if not feasible:
        raise SearchError("no gamma in the grid admits a central controller")
    return max(sorted(feasible), key=lambda g: feasible[g])


def run_hinf_comparison(nominal: TaskSpec, in_tests, out_tests, gamma_grid=GAMMA_GRID,
                        episodes: int = EVAL_EPISODES, seed: int = 0,
                        search: SearchConfig | None = None, anchor_episodes: int = ANCHOR_EPISODES,
                        jobs: int = 1, prepared=None) -> dict:
    """Synthesize on the nominal plant for every gamma, pick the best on the
    in-distribution tests, then score it on the out-of-distribution tests.
    Normalized scores are capped to [-1, 2] before averaging."""
    if not nominal.is_linear:
        raise ContractError("the H-infinity comparison is defined for linear tasks only")
    tests = list(in_tests) + list(out_tests)
    if prepared is None:
        prepared = _pmap(_fit_and_anchor, [(t, search, anchor_episodes, seed, 0) for t in tests], jobs)
    anchors = [p[1] for p in prepared]
    in_anchors, out_anchors = anchors[: len(in_tests)], anchors[len(in_tests):]
    ec = EvalConfig(episodes, None, _stream(seed, STREAM_EVAL), SCORE_CAP)
    grid, scores, controllers = [], {}, {}
    for gamma in gamma_grid:
        ctrl = solve_hinf_central(nominal.env, nominal.reward, float(gamma))
        if isinstance(ctrl, HinfInfeasible):
            log.info("gamma=%g infeasible: %s", gamma, ctrl.reason)
            grid.append({"gamma": float(gamma), "feasible": False, "reason": ctrl.reason})
            scores[float(gamma)] = None
            continue
        reps = [rollout_policy(t, HinfPolicy(ctrl), ec, "hinf", a) for t, a in zip(in_tests, in_anchors)]
        mean = float(np.mean([r.normalized.mean() for r in reps]))
        grid.append({"gamma": float(gamma), "feasible": True, "in_mean": mean})
        scores[float(gamma)] = mean
        controllers[float(gamma)] = ctrl
    best = select_gamma(scores)
    ctrl = controllers[best]
    in_reps = [rollout_policy(t, HinfPolicy(ctrl), ec, "hinf", a) for t, a in zip(in_tests, in_anchors)]
    out_reps = [rollout_policy(t, HinfPolicy(ctrl), ec, "hinf", a) for t, a in zip(out_tests, out_anchors)]
    return {
        "protocol": "hinf",
        "gamma_grid": [float(g) for g in gamma_grid],
        "grid": grid,
        "selected_gamma": best,
        "in_mean": float(np.mean([r.normalized.mean() for r in in_reps])) if in_reps else math.nan,
        "out_mean": float(np.mean([r.normalized.mean() for r in out_reps])) if out_reps else math.nan,
        "in": [r.to_dict() for r in in_reps],
        "out": [r.to_dict() for r in out_reps],
        "controller": ctrl.to_dict(),
    }
