"""Task specifications and the built-in control tasks.

The linear tasks he1/ac4/cm3 ship as seeded stand-ins with the published
state/action/observation dimensions; real system matrices can be dropped in
through :func:`load_linear_task` using the same JSON layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.linalg

from .environments import LinearSystemSpec, PdeSpec, RewardSpec
from .errors import ContractError

LINEAR_TASKS = ("he1", "ac4", "cm3")
PDE_TASKS = ("burgers", "cdr")

#: (n_s, n_a, n_o, n_steps, sample_time)
TASK_DIMENSIONS = {
    "he1": (4, 2, 1, 50, 0.05),
    "ac4": (9, 1, 2, 50, 0.05),
    "cm3": (120, 1, 2, 50, 0.25),
    "cdr": (64, 5, 10, 100, 0.1),
    "burgers": (64, 5, 10, 100, 0.05),
}

#: Upper end of the return-prompt range for each environment.
TARGET_RETURNS = {"he1": -10.0, "ac4": -0.1, "cm3": -5.0, "cdr": -300.0, "burgers": -110.0}

NOMINAL_PDE_PARAMS = {
    "burgers": {"nu": 1e-2, "phi": 0.125},
    "cdr": {"nu": 1e-2, "c": 0.1, "zeta": 0.0, "phi": 0.1},
}

PDE_ACTION_WEIGHT = 0.1


@dataclass
class TaskSpec:
    env: LinearSystemSpec | PdeSpec
    reward: RewardSpec
    task_id: str
    name: str = "custom"
    provenance: dict = field(default_factory=lambda: {"type": "nominal"})

    def __post_init__(self):
        if self.reward.n_s != self.env.n_s or self.reward.n_a != self.env.n_a:
            raise ContractError(
                f"reward dims ({self.reward.n_s}, {self.reward.n_a}) do not match "
                f"environment ({self.env.n_s}, {self.env.n_a})"
            )

    @property
    def is_linear(self) -> bool:
        return isinstance(self.env, LinearSystemSpec)

    @property
    def n_s(self) -> int:
        return self.env.n_s

    @property
    def n_a(self) -> int:
        return self.env.n_a

    @property
    def n_o(self) -> int:
        return self.env.n_o

    @property
    def n_steps(self) -> int:
        return self.env.n_steps

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "name": self.name,
            "env_type": "linear" if self.is_linear else "pde",
            "env": self.env.to_dict(),
            "reward": self.reward.to_dict(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        env_cls = LinearSystemSpec if d["env_type"] == "linear" else PdeSpec
        return cls(
            env=env_cls.from_dict(d["env"]),
            reward=RewardSpec.from_dict(d["reward"]),
            task_id=d["task_id"],
            name=d.get("name", "custom"),
            provenance=d.get("provenance", {"type": "nominal"}),
        )


def linear_task_from_json(doc: dict, task_id: str, name: str = "custom") -> TaskSpec:
    """Build a task from the matrix-file layout (A, B2, C, noise settings, Q1..s_r)."""
    sys = LinearSystemSpec.from_dict(doc)
    rew = RewardSpec.from_dict(doc)
    return TaskSpec(env=sys, reward=rew, task_id=task_id, name=name)


def linear_task_to_json(task: TaskSpec) -> dict:
    if not task.is_linear:
        raise ContractError("only linear tasks use the matrix file format")
    return {**task.env.to_dict(), **task.reward.to_dict()}


def load_linear_task(path, task_id: str | None = None, name: str = "custom") -> TaskSpec:
    path = Path(path)
    doc = json.loads(path.read_text())
    return linear_task_from_json(doc, task_id or path.stem, name)


def builtin_task(name: str, **overrides) -> TaskSpec:
    """Nominal task by name; PDE keyword overrides replace nominal parameters."""
    if name in LINEAR_TASKS:
        text = resources.files("ctrldt.data").joinpath(f"{name}.json").read_text()
        task = linear_task_from_json(json.loads(text), task_id=f"{name}-nominal", name=name)
        if overrides:
            env = LinearSystemSpec.from_dict({**task.env.to_dict(), **overrides})
            task = TaskSpec(env=env, reward=task.reward, task_id=task.task_id, name=name)
        return task
    if name in PDE_TASKS:
        params = {**NOMINAL_PDE_PARAMS[name], **overrides}
        return make_pde_task(name, params, task_id=f"{name}-nominal")
    raise ContractError(f"unknown task {name!r}; expected one of {LINEAR_TASKS + PDE_TASKS}")


def make_pde_task(kind: str, params: dict, task_id: str, provenance: dict | None = None) -> TaskSpec:
    n_s, n_a, n_o, n_steps, dt = TASK_DIMENSIONS[kind]
    settings = dict(n_s=n_s, n_a=n_a, n_o=n_o, n_steps=n_steps, sample_time=dt,
                    process_noise_cov=0.0, sensor_noise_cov=0.25)
    settings.update(params)
    spec = PdeSpec(kind=kind, **settings)
    rew = RewardSpec.identity(spec.n_s, spec.n_a, action_weight=PDE_ACTION_WEIGHT,
                              s_r=spec.target_field)
    return TaskSpec(env=spec, reward=rew, task_id=task_id, name=kind,
                    provenance=provenance or {"type": "nominal"})


# --- stand-in generation -------------------------------------------------

def is_stabilizable(A, B, tol: float = 1e-9) -> bool:
    """PBH test on the eigenvalues of A outside the open unit disc."""
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if abs(lam) >= 1 - tol:
            M = np.hstack([A - lam * np.eye(n), B])
            if np.linalg.matrix_rank(M, tol=1e-8) < n:
                return False
    return True


def is_detectable(A, C, tol: float = 1e-9) -> bool:
    return is_stabilizable(A.T, C.T, tol)


def _discretize(Ac, Bc, dt):
    n, m = Bc.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = Ac
    M[:n, n:] = Bc
    E = scipy.linalg.expm(M * dt)
    return E[:n, :n], E[:n, n:]


def _random_plant(rng, n_s, n_a, n_o, dt, max_real=0.15):
    Ac = rng.standard_normal((n_s, n_s)) / np.sqrt(n_s)
    shift = np.max(np.linalg.eigvals(Ac).real) - max_real
    Ac -= shift * np.eye(n_s)
    Bc = rng.standard_normal((n_s, n_a))
    C = rng.standard_normal((n_o, n_s)) / np.sqrt(n_s)
    A, B = _discretize(Ac, Bc, dt)
    return A, B, C


def _cable_mass(rng, n_masses, dt):
    """Damped mass-spring chain; state = (positions, velocities)."""
    k = 1.0 + 0.2 * rng.random(n_masses + 1)
    m = 1.0 + 0.2 * rng.random(n_masses)
    K = np.zeros((n_masses, n_masses))
    for i in range(n_masses):
        K[i, i] = k[i] + k[i + 1]
        if i + 1 < n_masses:
            K[i, i + 1] = K[i + 1, i] = -k[i + 1]
    Minv = np.diag(1.0 / m)
    Ac = np.block([[np.zeros((n_masses, n_masses)), np.eye(n_masses)],
                   [-Minv @ K, -0.02 * np.eye(n_masses)]])
    Bc = np.zeros((2 * n_masses, 1))
    Bc[n_masses + n_masses // 2, 0] = 1.0 / m[n_masses // 2]
    C = np.zeros((2, 2 * n_masses))
    C[0, n_masses // 2] = 1.0
    C[1, n_masses // 4] = 1.0
    A, B = _discretize(Ac, Bc, dt)
    return A, B, C


def make_standin(name: str, seed: int = 2024) -> dict:
    """Regenerate a stand-in system in the matrix file layout."""
    n_s, n_a, n_o, n_steps, dt = TASK_DIMENSIONS[name]
    rng = np.random.default_rng([seed, LINEAR_TASKS.index(name)])
    if name == "cm3":
        A, B, C = _cable_mass(rng, n_s // 2, dt)
    else:
        while True:
            A, B, C = _random_plant(rng, n_s, n_a, n_o, dt)
            if is_stabilizable(A, B) and is_detectable(A, C):
                break
    rew = RewardSpec.identity(n_s, n_a)
    sys = LinearSystemSpec(A=A, B2=B, C=C, noise_cov=0.01, n_steps=n_steps, init_std=1.0)
    return {**sys.to_dict(), **rew.to_dict()}
