"""``ctrldt`` command line.

Every command accepts ``--config file.json``; keys are the long flag names
with dashes replaced by underscores, and explicit flags win over the file.
Each run writes ``config.json`` (the resolved settings) next to its outputs,
and that file alone reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import protocols as P
from .classical import (HinfInfeasible, HinfPolicy, LQGPolicy, SearchConfig, StaticGain,
                        StaticPolicy, solve_hinf_central)
from .datasets import (Dataset, episode_seeds, linear_task_set, pde_task_set, read_dataset,
                       rollout_collect, write_dataset)
from .environments import Env
from .errors import (CheckpointError, ContractError, DatasetError, DivergenceError, SearchError,
                     SolverError, TrainingAborted)
from .policy import PRESETS, ModelConfig, load_checkpoint, save_checkpoint
from .tasks import LINEAR_TASKS, PDE_TASKS, TARGET_RETURNS, TaskSpec, builtin_task, load_linear_task

log = logging.getLogger("ctrldt")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- argument table ---------------------------------------------------------------

_TASK = [("task", str, None, "built-in task: " + ", ".join(LINEAR_TASKS + PDE_TASKS)),
         ("task_file", str, None, "linear task in the matrix JSON layout")]
_SEARCH = [("iterations", int, 100, "static-gain search iterations"),
           ("population", int, 32, "search population"),
           ("episodes_per_eval", int, 16, "episodes per candidate evaluation")]
_TRAIN = [("epochs", int, 10, "training epochs"),
          ("batch_size", int, 64, "minibatch size"),
          ("lr", float, 1e-4, "learning rate"),
          ("weight_decay", float, 1e-5, "decoupled weight decay")]
_MODEL = [("preset", str, "desk", "model preset: " + ", ".join(PRESETS)),
          ("model", json.loads, None, "JSON object of ModelConfig overrides")]

COMMANDS = {
    "env-sim": dict(help="roll a policy and dump trajectories as CSV", stochastic=True, args=_TASK + [
        ("policy", str, "zero", "zero | lqg | hinf | expert | medium"),
        ("demonstrators", str, None, "demonstrators.json for expert/medium"),
        ("gamma", float, 10.0, "attenuation level for --policy hinf"),
        ("episodes", int, 1, "episodes to simulate"),
        ("dump_field", bool, False, "also write the full state grid (PDE heatmaps)"),
    ]),
    "fit-demonstrator": dict(help="search expert and early-stopped static gains", stochastic=True,
                             args=_TASK + _SEARCH),
    "gen-data": dict(help="collect a trajectory dataset", stochastic=True, args=_TASK + _SEARCH + [
        ("kind", str, "expert", "expert | medium behaviour policy"),
        ("n_traj", int, 1000, "trajectories per task"),
        ("demonstrators", str, None, "reuse fitted demonstrators (single task only)"),
        ("task_set", str, None, "multi-task mode: train | in_dist | out_dist"),
        ("count", int, 30, "tasks in multi-task mode"),
        ("anchor_episodes", int, P.ANCHOR_EPISODES, "episodes per normalization anchor (0 = skip)"),
    ]),
    "train": dict(help="train a decision transformer (or BC baseline) offline", stochastic=True,
                  args=_MODEL + _TRAIN + [
                      ("data", list, None, "dataset file(s)"),
                      ("method", str, "dt", "dt | bc"),
                  ]),
    "eval": dict(help="evaluate a checkpoint with return prompting", stochastic=True, args=_TASK + [
        ("checkpoint", str, None, "checkpoint directory (or bc.json)"),
        ("data", str, None, "dataset whose tasks and anchors to evaluate on"),
        ("task_id", str, None, "restrict to one task of --data"),
        ("episodes", int, P.EVAL_EPISODES, "evaluation episodes"),
        ("target_return", float, None, "return prompt (default: best return in --data)"),
        ("score_cap", list, None, "clamp normalized scores to [low, high]"),
    ]),
    "adapt": dict(help="k-shot adaptation with low-rank adapters", stochastic=True, args=[
        ("checkpoint", str, None, "base checkpoint"),
        ("data", str, None, "demonstration dataset"),
        ("task_id", str, None, "task of --data to adapt on"),
        ("k", int, 10, "number of demonstrations"),
        ("epochs", int, P.K_SHOT_EPOCHS, "adaptation epochs"),
        ("batch_size", int, 64, "minibatch size"),
        ("lr", float, 1e-3, "adapter learning rate"),
        ("weight_decay", float, 1e-5, "decoupled weight decay"),
        ("adapt_all", bool, False, "fine-tune every base tensor instead of adapters"),
    ]),
    "hinf-compare": dict(help="gamma-scan the central H-infinity controller", stochastic=True,
                         args=_TASK + _SEARCH + [
                             ("n_in", int, 9, "in-distribution tests"),
                             ("n_out", int, 9, "out-of-distribution tests"),
                             ("episodes", int, P.EVAL_EPISODES, "episodes per test"),
                             ("anchor_episodes", int, P.ANCHOR_EPISODES, "episodes per anchor"),
                             ("gammas", list, list(P.GAMMA_GRID), "gamma grid"),
                         ]),
    "run-single": dict(help="full single-task protocol (expert/medium x demonstrator/BC/DT)",
                       stochastic=True, args=_TASK + _SEARCH + _MODEL + _TRAIN + [
                           ("n_traj", int, 1000, "trajectories per dataset"),
                           ("episodes", int, P.EVAL_EPISODES, "evaluation episodes"),
                           ("anchor_episodes", int, P.ANCHOR_EPISODES, "episodes per anchor"),
                           ("target_return", float, None, "return prompt (default: dataset best)"),
                       ]),
    "run-multitask": dict(help="full multi-task protocol (zero-/k-shot)", stochastic=True,
                          args=_TASK + _SEARCH + _MODEL + _TRAIN + [
                              ("n_train", int, 30, "training tasks"),
                              ("n_in", int, 9, "in-distribution tests"),
                              ("n_out", int, 9, "out-of-distribution tests"),
                              ("traj_per_task", int, 100, "expert trajectories per training task"),
                              ("k", int, 10, "shots"),
                              ("adapt_epochs", int, P.K_SHOT_EPOCHS, "adaptation epochs"),
                              ("adapt_lr", float, 1e-3, "adapter learning rate"),
                              ("adapt_all", bool, False, "fine-tune every base tensor"),
                              ("episodes", int, P.EVAL_EPISODES, "evaluation episodes"),
                              ("anchor_episodes", int, P.ANCHOR_EPISODES, "episodes per anchor"),
                              ("target_return", float, None, "return prompt (default: dataset best)"),
                          ]),
    "report": dict(help="aggregate JSON reports into CSV tables", stochastic=False, args=[
        ("inputs", list, None, "report.json files"),
    ]),
}

COMMON = [("seed", int, None, "seed (required for stochastic commands)"),
          ("out", str, "runs", "parent output directory"),
          ("run_dir", str, None, "exact output directory (default <out>/<command>-<timestamp>)"),
          ("overwrite", bool, False, "replace an existing output directory"),
          ("jobs", int, 1, "worker processes; 1 guarantees bit-reproducible output")]


_LIST_ITEM = {"gammas": float, "score_cap": float}


def _spec(command):
    return COMMANDS[command]["args"] + COMMON


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctrldt", description="Return-conditioned transformer control experiments")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, info in COMMANDS.items():
        p = sub.add_parser(name, help=info["help"], argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON configuration; explicit flags win")
        for dest, typ, default, help_text in _spec(name):
            flag = "--" + dest.replace("_", "-")
            shown = f"{help_text} (default: {default})"
            if typ is bool:
                p.add_argument(flag, dest=dest, action="store_true", help=shown)
            elif typ is list:
                p.add_argument(flag, dest=dest, nargs="+", type=_LIST_ITEM.get(dest, str), help=shown)
            else:
                p.add_argument(flag, dest=dest, type=typ, help=shown)
    return parser


def resolve(command: str, explicit: dict, config_path: str | None) -> dict:
    spec = {dest: default for dest, _, default, _ in _spec(command)}
    doc = {}
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ContractError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ContractError("config file must hold a JSON object")
        if doc.get("command", command) != command:
            raise ContractError(f"config was written for {doc['command']!r}, not {command!r}")
        doc = {k: v for k, v in doc.items() if k != "command"}
        unknown = sorted(set(doc) - set(spec))
        if unknown:
            raise ContractError(f"unknown config keys for {command}: {unknown}")
    resolved = {**spec, **doc, **explicit}
    if COMMANDS[command]["stochastic"] and resolved.get("seed") is None:
        raise ContractError(f"{command} is stochastic: --seed is required")
    return resolved


# --- helpers -----------------------------------------------------------------------

def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dump_json(path: Path, obj) -> None:
    clean = {k: v for k, v in obj.items() if not k.startswith("_")} if isinstance(obj, dict) else obj
    path.write_text(json.dumps(clean, indent=1, sort_keys=True, default=_json_default) + "\n")


def make_run_dir(command: str, cfg: dict) -> Path:
    if cfg.get("run_dir"):
        path = Path(cfg["run_dir"])
    else:
        path = Path(cfg["out"]) / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    if path.exists() and any(path.iterdir()):
        if not cfg["overwrite"]:
            raise ContractError(f"{path} exists; pass --overwrite to replace it")
        for child in sorted(path.rglob("*"), reverse=True):
            child.unlink() if child.is_file() else child.rmdir()
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_task(cfg: dict) -> TaskSpec:
    if cfg.get("task_file"):
        return load_linear_task(cfg["task_file"])
    if cfg.get("task"):
        return builtin_task(cfg["task"])
    raise ContractError("select a task with --task or --task-file")


def search_config(cfg: dict) -> SearchConfig:
    return SearchConfig(population=cfg["population"], iterations=cfg["iterations"],
                        episodes_per_eval=cfg["episodes_per_eval"], seed=cfg["seed"])


def train_config(cfg: dict, **kw) -> P.TrainConfig:
    base = dict(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                weight_decay=cfg["weight_decay"], seed=cfg["seed"])
    return P.TrainConfig(**{**base, **kw})


def model_config(cfg: dict, n_o: int, n_a: int) -> ModelConfig:
    if cfg["preset"] not in PRESETS:
        raise ContractError(f"unknown preset {cfg['preset']!r}")
    overrides = dict(cfg.get("model") or {})
    overrides.setdefault("seed", cfg["seed"])
    return ModelConfig.preset(cfg["preset"], n_o, n_a, **overrides)


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return format(float(x), ".17g")


# --- commands ----------------------------------------------------------------------------

def cmd_env_sim(cfg, out: Path):
    task = load_task(cfg)
    kind = cfg["policy"]
    if kind == "zero":
        policy = StaticPolicy(StaticGain.zeros(task.n_a, task.n_o))
    elif kind == "lqg":
        if not task.is_linear:
            raise ContractError("the LQG baseline needs a linear task")
        policy = LQGPolicy(task.env, task.reward)
    elif kind == "hinf":
        ctrl = solve_hinf_central(task.env, task.reward, cfg["gamma"])
        if isinstance(ctrl, HinfInfeasible):
            raise ContractError(f"gamma={cfg['gamma']} is infeasible: {ctrl.reason}")
        policy = HinfPolicy(ctrl)
    elif kind in ("expert", "medium"):
        if not cfg["demonstrators"]:
            raise ContractError("--demonstrators is required for expert/medium policies")
        demos = P.Demonstrators.from_dict(json.loads(Path(cfg["demonstrators"]).read_text()))
        policy = demos.policy(kind)
    else:
        raise ContractError(f"unknown policy {kind!r}")
    rows, field_rows, returns = [], [], []
    for e in range(cfg["episodes"]):
        env_seed, pol_seed = episode_seeds(cfg["seed"], e)
        env = Env(task)
        obs = env.reset(env_seed)
        policy.reset(np.random.default_rng(pol_seed))
        total = 0.0
        for t in range(task.n_steps):
            s = env.state.s
            a = np.asarray(policy.act(obs), dtype=float).reshape(task.n_a)
            res = env.step(a)
            policy.observe(res.reward)
            rows.append([e, t, *map(_fmt, obs), *map(_fmt, a), _fmt(res.reward)])
            if cfg["dump_field"]:
                field_rows.append([e, t, *map(_fmt, s)])
            total += res.reward
            obs = res.obs
        returns.append(total)
    _write_rows(out / "trajectories.csv",
                ["episode", "t", *[f"o{i}" for i in range(task.n_o)],
                 *[f"a{i}" for i in range(task.n_a)], "reward"], rows)
    if cfg["dump_field"]:
        _write_rows(out / "field.csv", ["episode", "t", *[f"s{i}" for i in range(task.n_s)]], field_rows)
    dump_json(out / "summary.json", {"task": task.to_dict(), "policy": kind, "returns": returns})


def cmd_fit_demonstrator(cfg, out: Path):
    task = load_task(cfg)
    demos = P.fit_demonstrators(task, search_config(cfg))
    dump_json(out / "demonstrators.json", {**demos.to_dict(), "task": task.to_dict(),
                                           "initial_return": demos.search.initial_return,
                                           "final_return": demos.search.final_return,
                                           "medium_iteration": demos.search.medium_iteration})
    (out / "search_trace.csv").write_text(demos.search.trace_csv())


def _gen_one(args):
    task, search, kind, n_traj, anchor_episodes, seed, demos = args
    demos = demos or P.fit_demonstrators(task, search)
    tag = P.STREAM_EXPERT_DATA if kind == "expert" else P.STREAM_MEDIUM_DATA
    trajs = rollout_collect(task, demos.policy(kind), n_traj, (seed, tag))
    anchors = P.compute_anchors(task, demos, anchor_episodes, seed)[0] if anchor_episodes else None
    return demos, trajs, anchors


def cmd_gen_data(cfg, out: Path):
    if cfg["kind"] not in ("expert", "medium"):
        raise ContractError("--kind must be expert or medium")
    search, seed = search_config(cfg), cfg["seed"]
    if cfg["task_set"]:
        if cfg["demonstrators"]:
            raise ContractError("--demonstrators applies to single-task datasets only")
        if cfg.get("task_file") or cfg["task"] in LINEAR_TASKS:
            tasks = linear_task_set(load_task(cfg), cfg["task_set"], cfg["count"], seed)
        else:
            tasks = pde_task_set(cfg["task"], cfg["task_set"], cfg["count"], seed)
        demo_list = [None] * len(tasks)
    else:
        tasks = [load_task(cfg)]
        demo_list = [P.Demonstrators.from_dict(json.loads(Path(cfg["demonstrators"]).read_text()))
                     if cfg["demonstrators"] else None]
    results = P._pmap(_gen_one, [(t, search, cfg["kind"], cfg["n_traj"], cfg["anchor_episodes"], seed, d)
                                 for t, d in zip(tasks, demo_list)], cfg["jobs"])
    trajs = [tr for _, ts, _ in results for tr in ts]
    anchors = {t.task_id: a for t, (_, _, a) in zip(tasks, results) if a is not None}
    meta = {"kind": cfg["kind"],
            "demonstrators": {t.task_id: d.to_dict() for t, (d, _, _) in zip(tasks, results)}}
    ds = Dataset(tasks, trajs, anchors, behavior_policy=f"static-{cfg['kind']}", seed=seed, meta=meta)
    write_dataset(out / "dataset.djsonl", ds)


def _load_datasets(paths):
    if not paths:
        raise ContractError("--data is required")
    paths = [paths] if isinstance(paths, str) else paths
    return [read_dataset(p) for p in paths]


def cmd_train(cfg, out: Path):
    datasets = _load_datasets(cfg["data"])
    trajs = [tr for d in datasets for tr in d.trajectories]
    if not trajs:
        raise ContractError("datasets hold no trajectories")
    n_o, n_a = trajs[0].obs.shape[1], trajs[0].act.shape[1]
    mcfg = model_config(cfg, n_o, n_a)
    tc = train_config(cfg)
    if cfg["method"] == "bc":
        model, rows = P.train_bc(trajs, mcfg.d_model, tc)
        dump_json(out / "bc.json", model.to_dict())
    elif cfg["method"] == "dt":
        if not (cfg.get("model") or {}).get("rtg_scale"):
            mcfg.rtg_scale = P.return_scale(trajs)
        try:
            res = P.train_offline(trajs, mcfg, tc)
        except TrainingAborted as exc:
            save_checkpoint(out / "checkpoint-last-good", exc.checkpoint)
            raise
        res.checkpoint.meta["target_return"] = P.dataset_target(trajs)
        save_checkpoint(out / "checkpoint", res.checkpoint)
        rows = res.log
    else:
        raise ContractError(f"unknown method {cfg['method']!r}")
    _write_rows(out / "train_log.csv", ["step", "loss", "lr", "wall_time"],
                [[s, _fmt(v), _fmt(lr), f"{w:.6f}"] for s, v, lr, w in rows])


def _load_model(path: str):
    p = Path(path)
    if p.is_file() and p.suffix == ".json":
        return "bc", P.BCModel.from_dict(json.loads(p.read_text()))
    return "dt", load_checkpoint(p)


def cmd_eval(cfg, out: Path):
    if not cfg["checkpoint"]:
        raise ContractError("--checkpoint is required")
    kind, model = _load_model(cfg["checkpoint"])
    anchors, best = {}, None
    if cfg["data"]:
        ds = read_dataset(cfg["data"])
        tasks = [ds.task(cfg["task_id"])] if cfg["task_id"] else ds.tasks
        anchors = ds.anchors
        if ds.trajectories:
            best = P.dataset_target(ds.trajectories)
    else:
        tasks = [load_task(cfg)]
    reports = []
    for task in tasks:
        target = cfg["target_return"]
        if target is None and kind == "dt":
            target = best if best is not None else model.meta.get("target_return", TARGET_RETURNS.get(task.name))
            if target is None:
                raise ContractError("no default return prompt for this task; pass --target-return")
        ec = P.EvalConfig(cfg["episodes"], target, (cfg["seed"], P.STREAM_EVAL), cfg["score_cap"])
        a = anchors.get(task.task_id)
        rep = P.rollout_dt(model, task, ec, a) if kind == "dt" else P.rollout_bc(model, task, ec, a)
        reports.append(rep.to_dict())
    dump_json(out / "report.json", {"protocol": "eval", "checkpoint": cfg["checkpoint"], "reports": reports})


def cmd_adapt(cfg, out: Path):
    if not cfg["checkpoint"]:
        raise ContractError("--checkpoint is required")
    ck = load_checkpoint(cfg["checkpoint"])
    ds = _load_datasets(cfg["data"])[0]
    trajs = ds.trajectories
    if cfg["task_id"]:
        trajs = [t for t in trajs if t.task_id == cfg["task_id"]]
    if len(trajs) < cfg["k"]:
        raise ContractError(f"need {cfg['k']} demonstrations, dataset has {len(trajs)}")
    for tid in {t.task_id for t in trajs}:
        P.check_compatible(ck.config, ds.task(tid))
    tc = P.TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                       weight_decay=cfg["weight_decay"], seed=cfg["seed"])
    res = P.adapt_k_shot(ck, trajs[: cfg["k"]], tc, cfg["adapt_all"], adapter_seed=cfg["seed"])
    save_checkpoint(out / "checkpoint", res.checkpoint)
    _write_rows(out / "train_log.csv", ["step", "loss", "lr", "wall_time"],
                [[s, _fmt(v), _fmt(lr), f"{w:.6f}"] for s, v, lr, w in res.log])


def cmd_hinf_compare(cfg, out: Path):
    nominal = load_task(cfg)
    if not nominal.is_linear:
        raise ContractError("hinf-compare needs a linear task")
    seed = cfg["seed"]
    in_tests = linear_task_set(nominal, "in_dist", cfg["n_in"], seed)
    out_tests = linear_task_set(nominal, "out_dist", cfg["n_out"], seed)
    rep = P.run_hinf_comparison(nominal, in_tests, out_tests, [float(g) for g in cfg["gammas"]],
                                cfg["episodes"], seed, search_config(cfg), cfg["anchor_episodes"],
                                cfg["jobs"])
    dump_json(out / "report.json", rep)
    _write_rows(out / "grid.csv", ["gamma", "feasible", "in_mean"],
                [[_fmt(g["gamma"]), g["feasible"], _fmt(g["in_mean"]) if g["feasible"] else ""]
                 for g in rep["grid"]])


def cmd_run_single(cfg, out: Path):
    task = load_task(cfg)
    st = P.SingleTaskConfig(n_traj=cfg["n_traj"], anchor_episodes=cfg["anchor_episodes"],
                            eval_episodes=cfg["episodes"], seed=cfg["seed"],
                            target_return=cfg["target_return"], train=train_config(cfg),
                            search=search_config(cfg))
    rep = P.run_single_task(task, model_config(cfg, task.n_o, task.n_a), st)
    for kind, art in rep["_artifacts"].items():
        save_checkpoint(out / f"dt-{kind}", art["dt"].checkpoint)
        dump_json(out / f"bc-{kind}.json", art["bc"].to_dict())
    dump_json(out / "report.json", rep)
    (out / "table1.csv").write_text(P.table1_csv(rep))


def cmd_run_multitask(cfg, out: Path):
    target = load_task(cfg) if (cfg.get("task_file") or cfg.get("task") in LINEAR_TASKS) else cfg["task"]
    if target is None:
        raise ContractError("select a task with --task or --task-file")
    probe = target if isinstance(target, TaskSpec) else builtin_task(target)
    n_o, n_a = probe.n_o, probe.n_a
    mc = P.MultiTaskConfig(
        n_train=cfg["n_train"], n_in=cfg["n_in"], n_out=cfg["n_out"], traj_per_task=cfg["traj_per_task"],
        k=cfg["k"], anchor_episodes=cfg["anchor_episodes"], eval_episodes=cfg["episodes"],
        seed=cfg["seed"], target_return=cfg["target_return"], train=train_config(cfg),
        adapt=P.TrainConfig(epochs=cfg["adapt_epochs"], lr=cfg["adapt_lr"], seed=cfg["seed"],
                            batch_size=cfg["batch_size"], weight_decay=cfg["weight_decay"]),
        adapt_all=cfg["adapt_all"], search=search_config(cfg), jobs=cfg["jobs"])
    rep = P.run_multitask(target, model_config(cfg, n_o, n_a), mc)
    save_checkpoint(out / "base", rep["_artifacts"]["base"].checkpoint)
    dump_json(out / "report.json", rep)
    (out / "table2.csv").write_text(P.table2_csv(rep))


def cmd_report(cfg, out: Path):
    inputs = cfg["inputs"]
    if not inputs:
        raise ContractError("--inputs is required")
    t1, t2, hinf, ev = [], [], [], []
    for path in inputs:
        try:
            rep = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ContractError(f"cannot read report {path}: {exc}") from None
        proto = rep.get("protocol")
        if proto == "single":
            grid = {(r["dataset"], r["method"]): r["normalized_mean"] for r in rep["rows"]}
            for ds in ("expert", "medium"):
                t1.append([rep["task"]["task_id"], ds] + [_fmt(grid[ds, m]) for m in ("demonstrator", "bc", "dt")])
        elif proto == "multitask":
            for dist in ("in", "out"):
                cells = [rep["cells"].get(f"{dist}/{s}", {}).get("mean") for s in ("zero_shot", "k_shot")]
                t2.append([path, dist] + ["" if c is None else _fmt(c) for c in cells])
        elif proto == "hinf":
            hinf.append([path, _fmt(rep["selected_gamma"]), _fmt(rep["in_mean"]), _fmt(rep["out_mean"])])
        elif proto == "eval":
            for r in rep["reports"]:
                ev.append([path, r["task_id"], _fmt(r["mean"]), _fmt(r.get("normalized_mean", float("nan")))])
        else:
            raise ContractError(f"{path}: unknown report protocol {proto!r}")
    if t1:
        _write_rows(out / "table1.csv", ["task", "dataset", "demonstrator", "bc", "dt"], t1)
    if t2:
        _write_rows(out / "table2.csv", ["report", "distribution", "zero_shot", "k_shot"], t2)
    if hinf:
        _write_rows(out / "hinf.csv", ["report", "selected_gamma", "in_mean", "out_mean"], hinf)
    if ev:
        _write_rows(out / "eval.csv", ["report", "task_id", "return_mean", "normalized_mean"], ev)


HANDLERS = {
    "env-sim": cmd_env_sim, "fit-demonstrator": cmd_fit_demonstrator, "gen-data": cmd_gen_data,
    "train": cmd_train, "eval": cmd_eval, "adapt": cmd_adapt, "hinf-compare": cmd_hinf_compare,
    "run-single": cmd_run_single, "run-multitask": cmd_run_multitask, "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if ns.command is None:
        parser.print_help(sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=getattr(logging, str(ns.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    explicit = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "log_level")}
    try:
        cfg = resolve(ns.command, explicit, getattr(ns, "config", None))
        torch.set_num_threads(max(1, int(cfg["jobs"])))
        out = make_run_dir(ns.command, cfg)
        snapshot = {"command": ns.command, **{k: v for k, v in cfg.items() if k not in ("run_dir", "overwrite")}}
        dump_json(out / "config.json", snapshot)
        HANDLERS[ns.command](cfg, out)
    except (ContractError, DatasetError, CheckpointError, KeyError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except (DivergenceError, SolverError, SearchError, TrainingAborted, FloatingPointError, RuntimeError) as exc:
        log.error("runtime fault: %s", exc)
        return EXIT_RUNTIME
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
