"""Partially observed discrete-time control environments.

Two families share one interface: linear systems

    s' = A s + B2 a + w,   o = C s' + v

and semi-discrete periodic PDEs (viscous Burgers, convection-diffusion-reaction)
driven through a bank of box-shaped actuators and read by point sensors.
The per-step reward is the negative quadratic tracking cost on (s, a).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Literal

import numpy as np

from .errors import ContractError, DivergenceError

#: |u|_inf above this is treated as a blown-up PDE simulation.
DIVERGENCE_BOUND = 1e6
#: Explicit substeps satisfy dt <= CFL_FRACTION * dx / max(|u|_inf, |c|, 1).
CFL_FRACTION = 0.2
#: Returns are undiscounted finite-horizon sums.
DISCOUNT = 1.0


def _matrix(x, name: str, ndim: int = 2) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    if ndim == 2 and arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if ndim == 1 and arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != ndim:
        raise ContractError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} has non-finite entries")
    return arr


@dataclass
class RewardSpec:
    """Weights of r = -(s-s_r)'Q1(s-s_r) - a'Q2 a - 2 (s-s_r)'Q3 a."""

    Q1: np.ndarray
    Q2: np.ndarray
    Q3: np.ndarray
    s_r: np.ndarray

    def __post_init__(self):
        self.Q1 = _matrix(self.Q1, "Q1")
        self.Q2 = _matrix(self.Q2, "Q2")
        self.Q3 = _matrix(self.Q3, "Q3")
        self.s_r = _matrix(self.s_r, "s_r", ndim=1)
        n_s, n_a = self.Q1.shape[0], self.Q2.shape[0]
        if self.Q1.shape != (n_s, n_s) or self.Q2.shape != (n_a, n_a):
            raise ContractError("Q1 and Q2 must be square")
        if self.Q3.shape != (n_s, n_a) or self.s_r.shape != (n_s,):
            raise ContractError(
                f"Q3 {self.Q3.shape} / s_r {self.s_r.shape} inconsistent with n_s={n_s}, n_a={n_a}"
            )
        if not (np.allclose(self.Q1, self.Q1.T) and np.allclose(self.Q2, self.Q2.T)):
            raise ContractError("Q1 and Q2 must be symmetric")
        if np.linalg.eigvalsh(self.Q1).min() < -1e-12:
            raise ContractError("Q1 must be positive semidefinite")
        if np.linalg.eigvalsh(self.Q2).min() <= 0:
            raise ContractError("Q2 must be positive definite")

    @property
    def n_s(self) -> int:
        return self.Q1.shape[0]

    @property
    def n_a(self) -> int:
        return self.Q2.shape[0]

    @classmethod
    def identity(cls, n_s: int, n_a: int, state_weight=1.0, action_weight=1.0, s_r=None):
        return cls(
            Q1=state_weight * np.eye(n_s),
            Q2=action_weight * np.eye(n_a),
            Q3=np.zeros((n_s, n_a)),
            s_r=np.zeros(n_s) if s_r is None else s_r,
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("Q1", "Q2", "Q3", "s_r")}

    @classmethod
    def from_dict(cls, d: dict) -> "RewardSpec":
        return cls(Q1=d["Q1"], Q2=d["Q2"], Q3=d["Q3"], s_r=d["s_r"])


@dataclass
class LinearSystemSpec:
    A: np.ndarray
    B2: np.ndarray
    C: np.ndarray
    noise_cov: float = 0.01
    n_steps: int = 50
    init_std: float = 1.0

    def __post_init__(self):
        self.A = _matrix(self.A, "A")
        self.B2 = _matrix(self.B2, "B2")
        self.C = _matrix(self.C, "C")
        n_s = self.A.shape[0]
        if self.A.shape != (n_s, n_s):
            raise ContractError(f"A must be square, got {self.A.shape}")
        if self.B2.shape[0] != n_s or self.C.shape[1] != n_s:
            raise ContractError(
                f"B2 {self.B2.shape} / C {self.C.shape} inconsistent with n_s={n_s}"
            )
        if self.noise_cov < 0 or self.init_std < 0:
            raise ContractError("noise_cov and init_std must be non-negative")
        if int(self.n_steps) < 1:
            raise ContractError("n_steps must be >= 1")
        self.noise_cov = float(self.noise_cov)
        self.init_std = float(self.init_std)
        self.n_steps = int(self.n_steps)

    @property
    def n_s(self) -> int:
        return self.A.shape[0]

    @property
    def n_a(self) -> int:
        return self.B2.shape[1]

    @property
    def n_o(self) -> int:
        return self.C.shape[0]

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "B2": self.B2.tolist(),
            "C": self.C.tolist(),
            "noise_cov": self.noise_cov,
            "n_steps": self.n_steps,
            "init_std": self.init_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearSystemSpec":
        return cls(**{k: d[k] for k in ("A", "B2", "C", "noise_cov", "n_steps", "init_std")})


@dataclass
class PdeSpec:
    kind: Literal["burgers", "cdr"]
    nu: float
    phi: float
    c: float = 0.0
    zeta: float = 0.0
    L: float = 1.0
    n_s: int = 64
    n_a: int = 5
    n_o: int = 10
    sample_time: float = 0.05
    process_noise_cov: float = 0.0
    sensor_noise_cov: float = 0.25
    n_steps: int = 100
    target_field: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.kind not in ("burgers", "cdr"):
            raise ContractError(f"unknown PDE kind {self.kind!r}")
        if self.nu <= 0 or self.L <= 0 or self.sample_time <= 0:
            raise ContractError("nu, L and sample_time must be positive")
        if not 0 < self.phi <= self.L:
            raise ContractError(f"phi must lie in (0, L], got {self.phi}")
        if self.n_o > self.n_s or min(self.n_a, self.n_o, self.n_s, self.n_steps) < 1:
            raise ContractError("need 1 <= n_o <= n_s, n_a >= 1, n_steps >= 1")
        if self.process_noise_cov < 0 or self.sensor_noise_cov < 0:
            raise ContractError("noise covariances must be non-negative")
        if self.target_field is None:
            self.target_field = default_target_field(self.kind, self.n_s, self.L)
        self.target_field = _matrix(self.target_field, "target_field", ndim=1)
        if self.target_field.shape != (self.n_s,):
            raise ContractError("target_field length must equal n_s")
        for name in ("nu", "phi", "c", "zeta", "L", "sample_time", "process_noise_cov", "sensor_noise_cov"):
            setattr(self, name, float(getattr(self, name)))
        for name in ("n_s", "n_a", "n_o", "n_steps"):
            setattr(self, name, int(getattr(self, name)))

    @property
    def dx(self) -> float:
        return self.L / self.n_s

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.n_s) * self.dx

    @cached_property
    def actuation(self) -> np.ndarray:
        return make_actuation_matrix(self.n_s, self.n_a, self.phi, self.L)

    @cached_property
    def sensor_index(self) -> np.ndarray:
        return sensor_indices(self.n_s, self.n_o)

    def to_dict(self) -> dict:
        d = {
            name: getattr(self, name)
            for name in (
                "kind", "nu", "c", "zeta", "phi", "L", "n_s", "n_a", "n_o", "sample_time",
                "process_noise_cov", "sensor_noise_cov", "n_steps",
            )
        }
        d["target_field"] = self.target_field.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PdeSpec":
        return cls(**d)


def default_target_field(kind: str, n_s: int, L: float = 1.0) -> np.ndarray:
    x = np.arange(n_s) * (L / n_s)
    if kind == "burgers":
        return -0.1 * np.cos(2 * np.pi * x / L)
    return 0.5 - 0.5 / np.cosh(20 * x - 10 * L)


@dataclass
class EnvState:
    s: np.ndarray
    t: int
    rng: np.random.Generator
    obs: np.ndarray


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool


def reward(s, a, spec: RewardSpec):
    """Negative quadratic tracking cost; broadcasts over leading batch axes."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if s.shape[-1:] != (spec.n_s,) or a.shape[-1:] != (spec.n_a,):
        raise ContractError(
            f"reward expects state (..., {spec.n_s}) and action (..., {spec.n_a}), "
            f"got {s.shape} and {a.shape}"
        )
    e = s - spec.s_r
    r = -(
        np.einsum("...i,ij,...j->...", e, spec.Q1, e)
        + np.einsum("...i,ij,...j->...", a, spec.Q2, a)
        + 2.0 * np.einsum("...i,ij,...j->...", e, spec.Q3, a)
    )
    return float(r) if r.ndim == 0 else r


def make_actuation_matrix(n_s: int, n_a: int, phi: float, L: float = 1.0) -> np.ndarray:
    """Box actuators of width phi centred at (j + 1/2) L / n_a on a periodic grid.

    Each actuator covers the round(phi * n_s / L) grid cells whose indices fall
    in a half-open window of that length around the centre.
    """
    if n_a < 1 or not 0 < phi <= L:
        raise ContractError("need n_a >= 1 and 0 < phi <= L")
    width = max(1, min(n_s, int(round(phi * n_s / L))))
    Phi = np.zeros((n_s, n_a))
    for j in range(n_a):
        centre = (j + 0.5) * n_s / n_a
        start = math.ceil(centre - width / 2)
        Phi[np.arange(start, start + width) % n_s, j] = 1.0
    return Phi


def sensor_indices(n_s: int, n_o: int) -> np.ndarray:
    return (np.arange(n_o) * n_s) // n_o


def observe_field(u, spec: PdeSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Point sensors at floor(i n_s / n_o) plus N(0, sensor_noise_cov) noise."""
    u = np.asarray(u, dtype=np.float64)
    obs = u[..., spec.sensor_index]
    if rng is not None:
        obs = obs + math.sqrt(spec.sensor_noise_cov) * rng.standard_normal(obs.shape)
    return obs


def _check_finite(s: np.ndarray, step: int, bound: float = math.inf) -> None:
    if not np.all(np.isfinite(s)) or (bound < math.inf and np.max(np.abs(s)) > bound):
        raise DivergenceError(step)


def linear_step(state: EnvState, a, sys: LinearSystemSpec, reward_spec: RewardSpec):
    if state.t >= sys.n_steps:
        raise ContractError("step called after the episode finished")
    a = np.asarray(a, dtype=np.float64).reshape(sys.n_a)
    r = reward(state.s, a, reward_spec)
    sigma = math.sqrt(sys.noise_cov)
    w = sigma * state.rng.standard_normal(sys.n_s)
    v = sigma * state.rng.standard_normal(sys.n_o)
    with np.errstate(over="ignore", invalid="ignore"):
        s_next = sys.A @ state.s + sys.B2 @ a + w
    _check_finite(s_next, state.t)
    obs = sys.C @ s_next + v
    t = state.t + 1
    new = EnvState(s=s_next, t=t, rng=state.rng, obs=obs)
    return new, StepResult(obs=obs, reward=r, done=t >= sys.n_steps)


@lru_cache(maxsize=256)
def _diffusion_inverse(n_s: int, ratio: float) -> np.ndarray:
    """Inverse of the periodic backward-Euler matrix I - ratio * D2."""
    M = (1.0 + 2.0 * ratio) * np.eye(n_s)
    idx = np.arange(n_s)
    M[idx, (idx + 1) % n_s] -= ratio
    M[idx, (idx - 1) % n_s] -= ratio
    inv = np.linalg.inv(M)
    inv.setflags(write=False)
    return inv


def substep_count(u: np.ndarray, spec: PdeSpec) -> int:
    speed = max(float(np.max(np.abs(u))), abs(spec.c), 1.0)
    dt_max = CFL_FRACTION * spec.dx / speed
    return max(1, math.ceil(spec.sample_time / dt_max - 1e-12))


def _explicit_rate(U: np.ndarray, forcing: np.ndarray, spec: PdeSpec) -> np.ndarray:
    up = np.roll(U, -1, axis=-1)
    um = np.roll(U, 1, axis=-1)
    if spec.kind == "burgers":
        # skew-symmetric split of (u^2/2)_x: conservative and energy-neutral
        conv = -((up * up - um * um) + U * (up - um)) / (6.0 * spec.dx)
        return conv + forcing
    conv = -spec.c * (up - um) / (2.0 * spec.dx)
    return conv + spec.zeta * U + forcing


def pde_advance(U: np.ndarray, actions: np.ndarray, spec: PdeSpec) -> np.ndarray:
    """Advance fields (..., n_s) by one sample_time without noise.

    Lie splitting per substep: explicit Euler for convection, reaction and
    actuation, then a backward-Euler periodic diffusion solve.
    """
    U = np.asarray(U, dtype=np.float64)
    batch = U.reshape(-1, spec.n_s)
    forcing = (np.asarray(actions, dtype=np.float64).reshape(-1, spec.n_a) @ spec.actuation.T)
    out = np.full_like(batch, np.nan)
    # fields already past the divergence bound would need unbounded substeps
    live = np.all(np.isfinite(batch), axis=1) & (np.max(np.abs(batch), axis=1) <= DIVERGENCE_BOUND)
    counts = np.array([substep_count(row, spec) if ok else 0 for row, ok in zip(batch, live)])
    for n_sub in np.unique(counts[live]):
        rows = np.flatnonzero(counts == n_sub)
        dt = spec.sample_time / n_sub
        inv_t = _diffusion_inverse(spec.n_s, spec.nu * dt / spec.dx**2).T
        u = batch[rows]
        f = forcing[rows]
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(int(n_sub)):
                u = (u + dt * _explicit_rate(u, f, spec)) @ inv_t
        out[rows] = u
    return out.reshape(U.shape)


def pde_step(state: EnvState, a, spec: PdeSpec, reward_spec: RewardSpec):
    if state.t >= spec.n_steps:
        raise ContractError("step called after the episode finished")
    if state.s.shape != (spec.n_s,):
        raise ContractError(f"field must have length {spec.n_s}")
    a = np.asarray(a, dtype=np.float64).reshape(spec.n_a)
    r = reward(state.s, a, reward_spec)
    w = math.sqrt(spec.process_noise_cov) * state.rng.standard_normal(spec.n_s)
    u = pde_advance(state.s, a, spec) + w
    _check_finite(u, state.t, DIVERGENCE_BOUND)
    obs = observe_field(u, spec, state.rng)
    t = state.t + 1
    new = EnvState(s=u, t=t, rng=state.rng, obs=obs)
    return new, StepResult(obs=obs, reward=r, done=t >= spec.n_steps)


def initial_field(spec: PdeSpec, rng: np.random.Generator) -> np.ndarray:
    coeffs = 0.1 * rng.standard_normal((4, 2))
    x = spec.grid
    u = np.zeros(spec.n_s)
    for m in range(1, 5):
        k = 2 * np.pi * m * x / spec.L
        u += coeffs[m - 1, 0] * np.sin(k) + coeffs[m - 1, 1] * np.cos(k)
    return u


def reset(task, seed) -> EnvState:
    """Sample the initial state (and first observation) of an episode.

    ``seed`` is anything accepted by ``numpy.random.default_rng``.
    """
    rng = np.random.default_rng(seed)
    env = task.env
    if isinstance(env, LinearSystemSpec):
        s0 = env.init_std * rng.standard_normal(env.n_s)
        obs = env.C @ s0 + math.sqrt(env.noise_cov) * rng.standard_normal(env.n_o)
    else:
        s0 = initial_field(env, rng)
        obs = observe_field(s0, env, rng)
    return EnvState(s=s0, t=0, rng=rng, obs=obs)


def step(state: EnvState, a, task):
    if isinstance(task.env, LinearSystemSpec):
        return linear_step(state, a, task.env, task.reward)
    return pde_step(state, a, task.env, task.reward)


class Env:
    """Stateful wrapper around :func:`reset` / :func:`step` for one task."""

    def __init__(self, task):
        self.task = task
        self.state: EnvState | None = None

    def reset(self, seed) -> np.ndarray:
        self.state = reset(self.task, seed)
        return self.state.obs

    def step(self, a) -> StepResult:
        if self.state is None:
            raise ContractError("reset must be called before step")
        self.state, result = step(self.state, a, self.task)
        return result
