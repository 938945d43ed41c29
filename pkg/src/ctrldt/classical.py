"""Model-based baselines and behaviour-policy generators.

Conventions: stage cost x'Q1x + u'Q2u + 2x'Q3u, control law u = -K x,
noise covariances W = V = noise_cov * I unless given explicitly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .environments import (
    DIVERGENCE_BOUND,
    LinearSystemSpec,
    RewardSpec,
    initial_field,
    pde_advance,
)
from .errors import ContractError, SearchError, SolverError

log = logging.getLogger(__name__)

RICCATI_TOL = 1e-10
RICCATI_MAX_ITER = 100_000


def _sym(M):
    return 0.5 * (M + M.T)


# --- LQR -----------------------------------------------------------------

@dataclass
class RiccatiSolution:
    P: np.ndarray
    K: np.ndarray
    gains: list = field(default_factory=list)
    values: list = field(default_factory=list)
    iterations: int = 0
    residual: float = 0.0


def riccati_map(P, A, B, Q1, Q2, Q3):
    """One backward Riccati step; returns (P_prev, K)."""
    BtP = B.T @ P
    G = Q2 + BtP @ B
    H = BtP @ A + Q3.T
    K = np.linalg.solve(G, H)
    P_prev = Q1 + A.T @ P @ A - H.T @ K
    return _sym(P_prev), K


def solve_lqr(A, B, Q1, Q2, Q3=None, horizon: int | None = None,
              tol: float = RICCATI_TOL, max_iter: int = RICCATI_MAX_ITER) -> RiccatiSolution:
    """Discrete-time LQR by Riccati recursion.

    ``horizon=None`` iterates the Riccati map to its fixed point; a finite
    ``horizon`` runs that many backward steps from zero terminal cost and
    returns stage-indexed gains ``gains[t]`` for t = 0..horizon-1.
    """
    A, B = np.atleast_2d(A).astype(float), np.atleast_2d(B).astype(float)
    Q1, Q2 = np.atleast_2d(Q1).astype(float), np.atleast_2d(Q2).astype(float)
    n, m = B.shape
    Q3 = np.zeros((n, m)) if Q3 is None else np.atleast_2d(Q3).astype(float)
    if A.shape != (n, n) or Q1.shape != (n, n) or Q2.shape != (m, m) or Q3.shape != (n, m):
        raise ContractError("inconsistent LQR dimensions")
    if np.linalg.eigvalsh(_sym(Q2)).min() <= 0:
        raise ContractError("Q2 must be positive definite")

    if horizon is not None:
        P = np.zeros((n, n))
        gains, values = [], [P]
        for _ in range(int(horizon)):
            P, K = riccati_map(P, A, B, Q1, Q2, Q3)
            gains.append(K)
            values.append(P)
        gains.reverse()
        values.reverse()
        K0 = gains[0] if gains else np.zeros((m, n))
        return RiccatiSolution(P=P, K=K0, gains=gains, values=values, iterations=int(horizon))

    P = Q1.copy()
    for it in range(1, max_iter + 1):
        P_new, K = riccati_map(P, A, B, Q1, Q2, Q3)
        if not np.all(np.isfinite(P_new)):
            raise SolverError("Riccati iteration diverged", float("inf"))
        delta = np.linalg.norm(P_new - P)
        P = P_new
        if delta <= tol * max(1.0, np.linalg.norm(P)):
            break
    else:
        raise SolverError(f"Riccati iteration did not converge in {max_iter} steps", delta)
    P_check, K = riccati_map(P, A, B, Q1, Q2, Q3)
    return RiccatiSolution(P=P, K=K, iterations=it, residual=float(np.linalg.norm(P_check - P)))


# --- Kalman filter ---------------------------------------------------------

@dataclass
class KalmanState:
    x_hat: np.ndarray
    Sigma: np.ndarray


def _noise(sys: LinearSystemSpec, W, V):
    W = sys.noise_cov * np.eye(sys.n_s) if W is None else np.atleast_2d(W)
    V = sys.noise_cov * np.eye(sys.n_o) if V is None else np.atleast_2d(V)
    return W, V


def kalman_update(kstate: KalmanState, o, C, V) -> KalmanState:
    C = np.atleast_2d(C)
    P = kstate.Sigma
    S = _sym(C @ P @ C.T + np.atleast_2d(V))
    if not np.all(np.isfinite(S)) or np.linalg.eigvalsh(S).min() < -1e-10 * max(1.0, np.abs(S).max()):
        raise SolverError("innovation covariance is not positive semidefinite")
    # S is singular only along directions that carry no information
    # (C P C' v = 0 and V v = 0 imply P C' v = 0), so the pseudo-inverse gives the limit gain
    gain = np.linalg.lstsq(S, C @ P, rcond=None)[0].T
    x = kstate.x_hat + gain @ (np.atleast_1d(o) - C @ kstate.x_hat)
    I_KC = np.eye(P.shape[0]) - gain @ C
    Sigma = I_KC @ P @ I_KC.T + gain @ np.atleast_2d(V) @ gain.T
    return KalmanState(x_hat=x, Sigma=_sym(Sigma))


def kalman_predict(kstate: KalmanState, a, A, B, W) -> KalmanState:
    x = A @ kstate.x_hat + B @ np.atleast_1d(a)
    return KalmanState(x_hat=x, Sigma=_sym(A @ kstate.Sigma @ A.T + W))


def kalman_step(kstate: KalmanState, a, o, sys: LinearSystemSpec, W=None, V=None) -> KalmanState:
    """Predict through (A, B2, W) with action ``a``, then correct with observation ``o``."""
    W, V = _noise(sys, W, V)
    pred = kalman_predict(kstate, a, sys.A, sys.B2, W)
    return kalman_update(pred, o, sys.C, V)


def steady_state_kalman(sys: LinearSystemSpec, W=None, V=None):
    """Stationary predicted covariance and filter gain (dual Riccati)."""
    W, V = _noise(sys, W, V)
    sol = solve_lqr(sys.A.T, sys.C.T, W, V)
    Sigma_pred = sol.P
    S = sys.C @ Sigma_pred @ sys.C.T + V
    gain = np.linalg.solve(S, sys.C @ Sigma_pred).T
    return Sigma_pred, gain


# --- policies ----------------------------------------------------------------

class Policy:
    """Maps the observed history to actions, one step at a time.

    ``reset`` starts an episode; ``act`` receives the newest observation and
    returns the action; ``observe`` receives the realised reward.
    """

    def reset(self, rng: np.random.Generator | None = None) -> None:
        pass

    def act(self, obs) -> np.ndarray:
        raise NotImplementedError

    def observe(self, reward: float) -> None:
        pass


@dataclass
class StaticGain:
    F: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.F = np.atleast_2d(np.asarray(self.F, dtype=float))
        self.bias = np.atleast_1d(np.asarray(self.bias, dtype=float))
        if self.bias.shape != (self.F.shape[0],):
            raise ContractError("bias length must equal the number of actions")
        if not (np.all(np.isfinite(self.F)) and np.all(np.isfinite(self.bias))):
            raise ContractError("static gain has non-finite entries")

    @classmethod
    def zeros(cls, n_a: int, n_o: int) -> "StaticGain":
        return cls(np.zeros((n_a, n_o)), np.zeros(n_a))

    def __call__(self, obs):
        return -self.F @ np.asarray(obs, dtype=float) + self.bias

    def to_dict(self) -> dict:
        return {"F": self.F.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_dict(cls, d) -> "StaticGain":
        return cls(d["F"], d["bias"])


class StaticPolicy(Policy):
    """a = -F o + bias, optionally with Gaussian exploration noise."""

    def __init__(self, gain: StaticGain, action_std: float = 0.0):
        self.gain = gain
        self.action_std = float(action_std)
        self._rng = None

    def reset(self, rng=None):
        self._rng = rng if rng is not None else np.random.default_rng(0)

    def act(self, obs):
        a = self.gain(obs)
        if self.action_std > 0:
            a = a + self.action_std * self._rng.standard_normal(a.shape)
        return a


class LQGPolicy(Policy):
    """Certainty-equivalent LQG: Kalman estimate fed to an LQR gain.

    ``finite_horizon`` switches to stage-indexed gains over the episode;
    ``steady_filter`` uses the stationary Kalman gain instead of the exact
    time-varying recursion started from the initial-state prior.
    """

    def __init__(self, sys: LinearSystemSpec, reward: RewardSpec,
                 finite_horizon: bool = False, steady_filter: bool = False):
        self.sys = sys
        self.W, self.V = _noise(sys, None, None)
        if finite_horizon:
            sol = solve_lqr(sys.A, sys.B2, reward.Q1, reward.Q2, reward.Q3, horizon=sys.n_steps)
            self.gains = sol.gains
        else:
            sol = solve_lqr(sys.A, sys.B2, reward.Q1, reward.Q2, reward.Q3)
            self.gains = None
        self.K = sol.K
        self.steady_filter = steady_filter
        if steady_filter:
            self.Sigma_pred, self.filter_gain = steady_state_kalman(sys)
        self.reset()

    def reset(self, rng=None):
        self.t = 0
        self.last_action = None
        self.kstate = KalmanState(np.zeros(self.sys.n_s), self.sys.init_std**2 * np.eye(self.sys.n_s))

    def _filter(self, obs):
        if self.steady_filter:
            x_pred = self.kstate.x_hat
            if self.last_action is not None:
                x_pred = self.sys.A @ x_pred + self.sys.B2 @ self.last_action
            x = x_pred + self.filter_gain @ (obs - self.sys.C @ x_pred)
            self.kstate = KalmanState(x, self.kstate.Sigma)
        elif self.last_action is None:
            self.kstate = kalman_update(self.kstate, obs, self.sys.C, self.V)
        else:
            self.kstate = kalman_step(self.kstate, self.last_action, obs, self.sys, self.W, self.V)

    def act(self, obs):
        self._filter(np.atleast_1d(np.asarray(obs, dtype=float)))
        K = self.gains[min(self.t, len(self.gains) - 1)] if self.gains else self.K
        a = -K @ self.kstate.x_hat
        self.last_action = a
        self.t += 1
        return a


def lqg_policy(observations, actions, sys: LinearSystemSpec, reward: RewardSpec, **kwargs):
    """Action for the newest observation given the full (o_0..o_t, a_0..a_{t-1}) history."""
    observations = list(observations)
    actions = list(actions)
    if len(actions) != len(observations) - 1:
        raise ContractError("need one fewer action than observations")
    pol = LQGPolicy(sys, reward, **kwargs)
    for o, a in zip(observations[:-1], actions):
        pol.act(o)
        pol.last_action = np.atleast_1d(np.asarray(a, dtype=float))
    return pol.act(observations[-1])


# --- central H-infinity controller -----------------------------------------------

@dataclass(frozen=True)
class HinfInfeasible:
    gamma: float
    reason: str

    def __bool__(self):
        return False


@dataclass(frozen=True)
class HinfController:
    """Stationary central controller for a feasible attenuation level gamma.

    Worst-case state estimate x_check = (I - P M / gamma^2)^-1 x_hat feeds the
    full-information saddle-point gain; x_hat comes from a Kalman-like filter
    whose time update is tilted by the state weight.
    """

    gamma: float
    M: np.ndarray
    P: np.ndarray
    P_pred: np.ndarray
    K: np.ndarray
    filter_gain: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q1: np.ndarray
    Q3: np.ndarray

    @property
    def estimate_map(self) -> np.ndarray:
        n = self.M.shape[0]
        return np.linalg.inv(np.eye(n) - self.P @ self.M / self.gamma**2)

    @property
    def tilt(self) -> np.ndarray:
        n = self.M.shape[0]
        return np.linalg.inv(np.eye(n) - self.P @ self.Q1 / self.gamma**2)

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            **{k: getattr(self, k).tolist() for k in ("M", "P", "P_pred", "K", "filter_gain")},
        }


class HinfPolicy(Policy):
    def __init__(self, ctrl: HinfController):
        self.ctrl = ctrl
        self._est = ctrl.estimate_map
        self._tilt = ctrl.tilt
        self.reset()

    def reset(self, rng=None):
        n = self.ctrl.M.shape[0]
        self.x_hat = None
        self.x_pred = np.zeros(n)

    def act(self, obs):
        c = self.ctrl
        obs = np.atleast_1d(np.asarray(obs, dtype=float))
        self.x_hat = self.x_pred + c.filter_gain @ (obs - c.C @ self.x_pred)
        a = -c.K @ (self._est @ self.x_hat)
        g2 = c.gamma**-2
        x_tilted = self._tilt @ (self.x_hat + g2 * c.P @ c.Q3 @ a)
        self.x_pred = c.A @ x_tilted + c.B @ a
        return a


def _control_game_riccati(A, B, R_inv, Q, DDt, gamma, tol, max_iter, Dm):
    n = A.shape[0]
    g2 = gamma**-2
    BRB = B @ R_inv @ B.T
    M = Q.copy()
    for _ in range(max_iter):
        Lam = np.eye(n) + (BRB - g2 * DDt) @ M
        M_new = _sym(Q + A.T @ M @ np.linalg.solve(Lam, A))
        if not np.all(np.isfinite(M_new)):
            return None, "control Riccati diverged"
        if Dm.size and np.linalg.eigvalsh(gamma**2 * np.eye(Dm.shape[1]) - Dm.T @ M_new @ Dm).min() <= 0:
            return None, "disturbance concavity condition violated"
        delta = np.linalg.norm(M_new - M)
        M = M_new
        if delta <= tol * max(1.0, np.linalg.norm(M)):
            return M, ""
    return None, "control Riccati did not converge"


def _filter_game_riccati(A, C, Q1, DDt, EEt, P0_pred, gamma, tol, max_iter):
    n = A.shape[0]
    g2 = gamma**-2
    P_pred = P0_pred
    P = None
    for _ in range(max_iter):
        S = C @ P_pred @ C.T + EEt
        P = _sym(P_pred - P_pred @ C.T @ np.linalg.solve(S, C @ P_pred))
        if np.max(np.abs(np.linalg.eigvals(P @ Q1))) * g2 >= 1:
            return None, None, "filter tilt condition violated"
        tilted = np.linalg.solve(np.eye(n) - g2 * P @ Q1, P)
        P_pred_new = _sym(A @ tilted @ A.T + DDt)
        if not np.all(np.isfinite(P_pred_new)):
            return None, None, "filter Riccati diverged"
        delta = np.linalg.norm(P_pred_new - P_pred)
        P_pred = P_pred_new
        if delta <= tol * max(1.0, np.linalg.norm(P_pred)):
            S = C @ P_pred @ C.T + EEt
            P = _sym(P_pred - P_pred @ C.T @ np.linalg.solve(S, C @ P_pred))
            return P, P_pred, ""
    return None, None, "filter Riccati did not converge"


def solve_hinf_central(sys: LinearSystemSpec, reward: RewardSpec, gamma: float,
                       tol: float = RICCATI_TOL, max_iter: int = RICCATI_MAX_ITER):
    """Central output-feedback controller at attenuation level ``gamma``.

    Disturbances enter through the noise channels: process w scaled by
    sqrt(noise_cov) on every state, sensor v likewise on every output.
    Returns :class:`HinfInfeasible` when any Riccati condition fails.
    """
    if gamma <= 0:
        raise ContractError("gamma must be positive")
    A, B, C = sys.A, sys.B2, sys.C
    n = sys.n_s
    sigma = math.sqrt(sys.noise_cov)
    Dm = sigma * np.eye(n)
    DDt = Dm @ Dm.T
    EEt = sys.noise_cov * np.eye(sys.n_o)
    Q1, Q2, Q3 = reward.Q1, reward.Q2, reward.Q3
    R_inv = np.linalg.inv(Q2)
    # completion of squares removes the cross weight
    A_t = A - B @ R_inv @ Q3.T
    Q_t = _sym(Q1 - Q3 @ R_inv @ Q3.T)

    M, why = _control_game_riccati(A_t, B, R_inv, Q_t, DDt, gamma, tol, max_iter, Dm)
    if M is None:
        return HinfInfeasible(gamma, why)
    g2 = gamma**-2
    Lam = np.eye(n) + (B @ R_inv @ B.T - g2 * DDt) @ M
    K = R_inv @ B.T @ M @ np.linalg.solve(Lam, A_t) + R_inv @ Q3.T

    P0 = max(sys.init_std**2, sys.noise_cov) * np.eye(n)
    P, P_pred, why = _filter_game_riccati(A, C, Q1, DDt, EEt, P0, gamma, tol, max_iter)
    if P is None:
        return HinfInfeasible(gamma, why)
    rho = np.max(np.abs(np.linalg.eigvals(P @ M)))
    if rho >= gamma**2:
        return HinfInfeasible(gamma, f"coupling condition violated: rho(PM)={rho:.4g} >= gamma^2")
    S = C @ P_pred @ C.T + EEt
    filter_gain = np.linalg.solve(S, C @ P_pred).T
    return HinfController(gamma=float(gamma), M=M, P=P, P_pred=P_pred, K=K,
                          filter_gain=filter_gain, A=A, B=B, C=C, Q1=Q1, Q3=Q3)


def hinf_threshold(sys, reward, lo: float, hi: float, tol: float = 1e-4) -> tuple[float, float]:
    """Bisect the smallest feasible gamma; returns an (infeasible, feasible) bracket."""
    if not solve_hinf_central(sys, reward, hi):
        raise ContractError("upper bracket must be feasible")
    if solve_hinf_central(sys, reward, lo):
        raise ContractError("lower bracket must be infeasible")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if solve_hinf_central(sys, reward, mid):
            hi = mid
        else:
            lo = mid
    return lo, hi


# --- static output-feedback search ------------------------------------------------

@dataclass
class SearchConfig:
    population: int = 32
    elites: int = 8
    iterations: int = 100
    episodes_per_eval: int = 16
    seed: int = 0
    init_sigma: float = 0.1
    extra_sigma_decay: float = 0.9
    min_sigma: float = 1e-4
    patience: int = 10
    plateau_tol: float = 1e-4
    medium_fraction: float = 0.25
    fit_bias: bool | None = None


@dataclass
class SearchResult:
    expert: StaticGain
    medium: StaticGain
    trace: list
    initial_return: float
    final_return: float
    medium_iteration: int
    iterations_run: int

    def trace_csv(self) -> str:
        lines = ["iteration,mean_return,best_return"]
        lines += [f"{i},{m:.17g},{b:.17g}" for i, m, b in self.trace]
        return "\n".join(lines) + "\n"


def _episode_noise(task, seeds):
    """Pre-draw every episode's random stream in the order the environment consumes it."""
    env = task.env
    init, steps = [], []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        if isinstance(env, LinearSystemSpec):
            s0 = env.init_std * rng.standard_normal(env.n_s)
            v0 = rng.standard_normal(env.n_o)
        else:
            s0 = initial_field(env, rng)
            v0 = rng.standard_normal(env.n_o)
        init.append((s0, v0))
        steps.append(rng.standard_normal((env.n_steps, env.n_s + env.n_o)))
    s0 = np.stack([x[0] for x in init])
    v0 = np.stack([x[1] for x in init])
    return s0, v0, np.stack(steps)


def simulate_static(task, F, bias, noise) -> np.ndarray:
    """Returns (n_candidates, n_episodes) of static gains under shared noise.

    Diverged episodes score -inf.  Matches stepping :class:`~ctrldt.environments.Env`
    with the same episode seeds.
    """
    env = task.env
    s0, v0, Z = noise
    n_c, n_e = F.shape[0], s0.shape[0]
    S = np.broadcast_to(s0, (n_c, n_e, env.n_s)).copy()
    if isinstance(env, LinearSystemSpec):
        sw, sv = math.sqrt(env.noise_cov), math.sqrt(env.noise_cov)
        obs = S @ env.C.T + sv * v0
    else:
        sw, sv = math.sqrt(env.process_noise_cov), math.sqrt(env.sensor_noise_cov)
        obs = S[..., env.sensor_index] + sv * v0
    rew = task.reward
    total = np.zeros((n_c, n_e))
    alive = np.ones((n_c, n_e), dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(env.n_steps):
            a = -np.einsum("cij,cej->cei", F, obs) + bias[:, None, :]
            e = S - rew.s_r
            total -= (np.einsum("cei,ij,cej->ce", e, rew.Q1, e)
                      + np.einsum("cei,ij,cej->ce", a, rew.Q2, a)
                      + 2 * np.einsum("cei,ij,cej->ce", e, rew.Q3, a))
            w = sw * Z[:, t, : env.n_s]
            v = sv * Z[:, t, env.n_s:]
            if isinstance(env, LinearSystemSpec):
                S = S @ env.A.T + a @ env.B2.T + w
                ok = np.all(np.isfinite(S), axis=-1)
                obs = S @ env.C.T + v
            else:
                S = pde_advance(np.where(alive[..., None], S, 0.0), a, env) + w
                ok = np.all(np.isfinite(S), axis=-1) & (np.max(np.abs(S), axis=-1) <= DIVERGENCE_BOUND)
                obs = S[..., env.sensor_index] + v
            alive &= ok
            S = np.where(alive[..., None], S, 0.0)
            obs = np.where(alive[..., None], obs, 0.0)
    total[~alive] = -np.inf
    return total


def search_static_gain(task, config: SearchConfig | None = None,
                       initial: StaticGain | None = None) -> SearchResult:
    """Elitist cross-entropy search over static output-feedback gains.

    Candidates are ranked by mean return over a fixed set of episodes, so the
    objective is deterministic and the elite pool only ever improves.  The
    run stops when the best return plateaus or the iteration budget ends;
    the medium gain is the incumbent at the first iteration that reached
    ``medium_fraction`` of the total improvement.
    """
    cfg = config or SearchConfig()
    n_a, n_o = task.n_a, task.n_o
    fit_bias = cfg.fit_bias
    if fit_bias is None:
        fit_bias = bool(np.any(task.reward.s_r != 0))
    init = initial or StaticGain.zeros(n_a, n_o)
    dim = n_a * n_o + (n_a if fit_bias else 0)

    def unpack(theta):
        theta = np.atleast_2d(theta)
        F = theta[:, : n_a * n_o].reshape(-1, n_a, n_o)
        b = theta[:, n_a * n_o:] if fit_bias else np.broadcast_to(init.bias, (len(theta), n_a))
        return F, np.ascontiguousarray(b)

    theta0 = init.F.ravel()
    if fit_bias:
        theta0 = np.concatenate([theta0, init.bias])
    seeds = [np.random.SeedSequence([cfg.seed, 1, e]) for e in range(cfg.episodes_per_eval)]
    noise = _episode_noise(task, seeds)
    rng = np.random.default_rng([cfg.seed, 0])

    def evaluate(thetas):
        F, b = unpack(thetas)
        return simulate_static(task, F, b, noise).mean(axis=1)

    J0 = float(evaluate(theta0)[0])
    pool_theta = theta0[None, :]
    pool_J = np.array([J0])
    history = [theta0]
    trace = []
    mu, sigma = theta0.copy(), np.full(dim, cfg.init_sigma)
    best_hist = [J0]
    it = 0
    for it in range(1, cfg.iterations + 1):
        extra = cfg.init_sigma * cfg.extra_sigma_decay**it
        cand = mu + np.maximum(sigma, cfg.min_sigma) * rng.standard_normal((cfg.population, dim))
        J = evaluate(cand)
        all_theta = np.vstack([pool_theta, cand])
        all_J = np.concatenate([pool_J, J])
        order = np.argsort(-all_J, kind="stable")[: cfg.elites]
        pool_theta, pool_J = all_theta[order], all_J[order]
        if not np.isfinite(pool_J[0]):
            raise SearchError(
                f"every candidate diverged by iteration {it} (task {task.task_id}); "
                f"initial return {J0}, sigma {float(sigma.mean()):.3g}"
            )
        finite = np.isfinite(pool_J)
        mu = pool_theta[finite].mean(axis=0)
        spread = pool_theta[finite].std(axis=0) if finite.sum() > 1 else np.zeros(dim)
        sigma = spread + extra
        elite_mean = float(pool_J[finite].mean()) if finite.all() else -math.inf
        trace.append((it, elite_mean, float(pool_J[0])))
        history.append(pool_theta[0].copy())
        best_hist.append(float(pool_J[0]))
        if it > cfg.patience:
            gain = best_hist[-1] - best_hist[-1 - cfg.patience]
            if gain <= cfg.plateau_tol * abs(best_hist[-1]):
                break

    J_final = best_hist[-1]
    threshold = J0 + cfg.medium_fraction * (J_final - J0)
    medium_it = next(i for i, J in enumerate(best_hist) if J >= threshold)
    F, b = unpack(history[-1])
    Fm, bm = unpack(history[medium_it])
    log.info("static search on %s: J0=%.4g final=%.4g medium@%d=%.4g after %d iterations",
             task.task_id, J0, J_final, medium_it, best_hist[medium_it], it)
    return SearchResult(
        expert=StaticGain(F[0], b[0]),
        medium=StaticGain(Fm[0], bm[0]),
        trace=trace,
        initial_return=J0,
        final_return=J_final,
        medium_iteration=medium_it,
        iterations_run=it if cfg.iterations else 0,
    )


def fit_static_gain(task, search: SearchConfig | None = None, mode: str = "converged",
                    initial: StaticGain | None = None):
    """Returns (gain, score trace) for the converged or early-stopped demonstrator."""
    if mode not in ("converged", "early_stopped"):
        raise ContractError(f"unknown mode {mode!r}")
    res = search_static_gain(task, search, initial)
    return (res.expert if mode == "converged" else res.medium), res.trace
