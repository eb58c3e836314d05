"""Receding-horizon MPC for one lane and the two-lane decision rule on top.

The prediction model is a point-mass ego with neighbour speeds frozen at
their current values. The horizon cost is piecewise linear (absolute
deviations), so the optimiser is a derivative-free box-constrained pattern
search: seed with the best constant acceleration (an even grid, zero, and the
current acceleration), then cyclic moves along single controls and along
suffix blocks with a shrinking step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
from numba import njit

from .sim import Observation, SimConfig

STATE_FIELDS = ("d_p", "d_f", "v_ego", "dv_p", "dv_f", "a_ego", "jerk")
CURRENT, TARGET = "current", "target"
DECISION_LOG_COLUMNS = ("step", "J_c", "J_target", "lane_switch", "u_d")


@dataclass(frozen=True)
class MpcState:
    d_p: float
    d_f: float
    v_ego: float
    dv_p: float
    dv_f: float
    a_ego: float
    jerk: float

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in STATE_FIELDS], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "MpcState":
        return cls(*(float(x) for x in arr))

    @classmethod
    def from_observation(cls, obs: Observation, role: str, a_ego: float, jerk: float) -> "MpcState":
        if role == CURRENT:
            d_p, d_f, v_p, v_f = obs.d_p, obs.d_f, obs.v_p, obs.v_f
        elif role == TARGET:
            d_p, d_f, v_p, v_f = obs.d_tp, obs.d_tf, obs.v_tp, obs.v_tf
        else:
            raise ValueError(f"unknown lane role {role!r}")
        v = obs.v_ego
        return cls(d_p, d_f, v, v_p - v, v - v_f, a_ego, jerk)


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 5
    ts: float = 0.1
    w1: float = 0.5
    w2: float = 0.4
    w3: float = 0.72
    w4: float = 0.5
    d_safe: float = 25.0
    v_safe: float = 13.89
    a_min: float = -4.5
    a_max: float = 2.6
    j_th: float = 0.8
    k_p: float = 0.1
    seed_levels: int = 7
    oracle_levels: int = 5
    init_step: float = 1.0
    max_sweeps: int = 40
    tol: float = 1e-8
    literal_model: bool = False

    def validate(self) -> "MpcConfig":
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.j_th <= 0:
            raise ValueError("j_th must be positive")
        if self.k_p < 0:
            raise ValueError("k_p must be non-negative")
        if not self.a_min < self.a_max:
            raise ValueError("a_min must be below a_max")
        if self.ts <= 0 or self.seed_levels < 2 or self.max_sweeps < 0 or self.init_step <= 0:
            raise ValueError("invalid solver settings")
        return self

    @classmethod
    def from_sim(cls, sim: SimConfig, **overrides) -> "MpcConfig":
        base = cls(ts=sim.dt, w1=sim.w1, w2=sim.w2, w3=sim.w3, w4=sim.w4, d_safe=sim.d_safe,
                   v_safe=sim.v_safe, a_min=sim.a_min, a_max=sim.a_max)
        return replace(base, **overrides).validate()

    def weights(self) -> np.ndarray:
        return np.array([self.w1, self.w2, self.w3, self.w4])


@dataclass(frozen=True)
class MpcSolution:
    u: np.ndarray
    J: float
    sweeps: int = 0

    @property
    def first_control(self) -> float:
        return float(self.u[0])


@dataclass(frozen=True)
class TlaccDecision:
    lane_switch: int
    u_d: float
    j_current: float
    j_target: float | None = None


def literal_matrices(ts: float):
    """The (A, B) pair of the linear prediction model, entry for entry."""
    A = np.array(
        [
            [1, 0, -ts, ts, 0, 0, 0],
            [0, 1, ts, 0, -ts, 0, 0],
            [0, 0, 1, 0, 0, ts, 0],
            [0, 0, 0, 1, 0, 0, 0],
            [0, 0, 0, 0, 1, 0, 0],
            [0, 0, 0, 0, 0, 0, 0],
            [0, 0, 0, 0, 0, -1 / ts, 0],
        ],
        dtype=np.float64,
    )
    B = np.array([0, 0, 0, 0, 0, 1, 1 / ts], dtype=np.float64)
    return A, B


@njit(cache=True)
def _rollout(x0, u, ts, literal, out):
    out[0, :] = x0
    n = u.shape[0]
    if literal:
        for k in range(n):
            d_p, d_f, v, dvp, dvf, a, j = out[k]
            out[k + 1, 0] = d_p - ts * v + ts * dvp
            out[k + 1, 1] = d_f + ts * v - ts * dvf
            out[k + 1, 2] = v + ts * a
            out[k + 1, 3] = dvp
            out[k + 1, 4] = dvf
            out[k + 1, 5] = u[k]
            out[k + 1, 6] = -a / ts + u[k] / ts
        return
    v_lead = x0[2] + x0[3]
    v_follow = x0[2] - x0[4]
    for k in range(n):
        d_p, d_f, v, dvp, dvf, a, j = out[k]
        v_new = v + ts * u[k]
        out[k + 1, 0] = d_p + ts * dvp
        out[k + 1, 1] = d_f + ts * dvf
        out[k + 1, 2] = v_new
        out[k + 1, 3] = v_lead - v_new
        out[k + 1, 4] = v_new - v_follow
        out[k + 1, 5] = u[k]
        out[k + 1, 6] = (u[k] - a) / ts


@njit(cache=True)
def _traj_cost(traj, w, d_safe, v_safe, target):
    n = traj.shape[0] - 1
    total = 0.0
    for k in range(1, n + 1):
        stage = w[0] * abs(traj[k, 0] - d_safe)
        if target:
            stage += w[1] * abs(traj[k, 1] - d_safe)
        stage += w[2] * abs(traj[k, 2] - v_safe)
        stage += w[3] * abs(traj[k, 6])
        total += stage
    return total / n


@njit(cache=True)
def _cost(x0, u, ts, literal, w, d_safe, v_safe, target, buf):
    _rollout(x0, u, ts, literal, buf)
    return _traj_cost(buf, w, d_safe, v_safe, target)


@njit(cache=True)
def _pattern_search(x0, n, ts, literal, w, d_safe, v_safe, target, lo, hi,
                    seed_levels, init_step, max_sweeps, tol, history):
    buf = np.empty((n + 1, 7))
    u = np.empty(n)
    cand = np.empty(n)
    best_level = lo
    best = np.inf
    # constant seeds: an even grid over the box, then zero and holding the current acceleration
    for i in range(seed_levels + 2):
        if i < seed_levels:
            level = lo + (hi - lo) * i / (seed_levels - 1)
            if i == seed_levels - 1:
                level = hi
        elif i == seed_levels:
            level = 0.0
        else:
            level = x0[5]
        level = min(max(level, lo), hi)
        cand[:] = level
        c = _cost(x0, cand, ts, literal, w, d_safe, v_safe, target, buf)
        if c < best:
            best = c
            best_level = level
    u[:] = best_level
    J = best
    history[0] = J
    step = init_step
    sweeps = 0
    while sweeps < max_sweeps and step >= tol:
        improved = False
        # directions 0..n-1: single control k; n..2n-1: controls k-n..n-1 together
        for d in range(2 * n):
            for sign in (1.0, -1.0):
                cand[:] = u
                if d < n:
                    cand[d] = min(max(cand[d] + sign * step, lo), hi)
                else:
                    for k in range(d - n, n):
                        cand[k] = min(max(cand[k] + sign * step, lo), hi)
                c = _cost(x0, cand, ts, literal, w, d_safe, v_safe, target, buf)
                if c < J:
                    u[:] = cand
                    J = c
                    improved = True
                    break
        sweeps += 1
        history[sweeps] = J
        if not improved:
            step *= 0.5
    return u, J, sweeps


def _check_u(u, config: MpcConfig) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (config.horizon,):
        raise ValueError(f"control sequence must have length {config.horizon}, got {u.shape}")
    return u


def predict(x0: MpcState, u, config: MpcConfig, literal: bool | None = None) -> np.ndarray:
    """State trajectory of shape (N+1, 7); row 0 is ``x0``."""
    u = _check_u(u, config)
    literal = config.literal_model if literal is None else literal
    out = np.empty((len(u) + 1, 7))
    _rollout(x0.to_array(), u, config.ts, literal, out)
    return out


def horizon_cost(traj, role: str, config: MpcConfig) -> float:
    """Mean stage cost over steps 1..N; the follower gap counts only for the target lane."""
    if role not in (CURRENT, TARGET):
        raise ValueError(f"unknown lane role {role!r}")
    return float(_traj_cost(np.asarray(traj, dtype=np.float64), config.weights(), config.d_safe,
                            config.v_safe, role == TARGET))


def solve(x0: MpcState, role: str, config: MpcConfig, return_history: bool = False):
    if role not in (CURRENT, TARGET):
        raise ValueError(f"unknown lane role {role!r}")
    history = np.full(config.max_sweeps + 1, np.nan)
    u, J, sweeps = _pattern_search(
        x0.to_array(), config.horizon, config.ts, config.literal_model, config.weights(),
        config.d_safe, config.v_safe, role == TARGET, config.a_min, config.a_max,
        config.seed_levels, config.init_step, config.max_sweeps, config.tol, history,
    )
    sol = MpcSolution(u.copy(), float(J), int(sweeps))
    if return_history:
        return sol, history[: sweeps + 1]
    return sol


def grid_search(x0: MpcState, role: str, config: MpcConfig, levels: int | None = None) -> MpcSolution:
    """Exhaustive search over ``levels``^N sequences on an even grid of the control box."""
    levels = config.oracle_levels if levels is None else levels
    grid = np.linspace(config.a_min, config.a_max, levels)
    best_u, best_J = None, np.inf
    for idx in np.ndindex(*([levels] * config.horizon)):
        u = grid[list(idx)]
        J = horizon_cost(predict(x0, u, config), role, config)
        if J < best_J:
            best_u, best_J = u, J
    return MpcSolution(best_u, best_J)


def lane_change_wins(j_current: float, j_target: float, config: MpcConfig) -> bool:
    return (1.0 + config.k_p) * j_target <= j_current


def tlacc_decide(obs: Observation, a_ego: float, jerk: float, config: MpcConfig, solver=solve) -> TlaccDecision:
    """Stay unless the current lane is costly and the target lane is cheaper by the k_p margin."""
    current = solver(MpcState.from_observation(obs, CURRENT, a_ego, jerk), CURRENT, config)
    if current.J <= config.j_th:
        return TlaccDecision(0, current.first_control, current.J)
    target = solver(MpcState.from_observation(obs, TARGET, a_ego, jerk), TARGET, config)
    if lane_change_wins(current.J, target.J, config):
        return TlaccDecision(1, target.first_control, current.J, target.J)
    return TlaccDecision(0, current.first_control, current.J, target.J)


class DecisionLog:
    def __init__(self, stream):
        self._writer = csv.writer(stream, lineterminator="\n")
        self._writer.writerow(DECISION_LOG_COLUMNS)

    def write(self, step: int, decision: TlaccDecision) -> None:
        j_t = "" if decision.j_target is None else repr(decision.j_target)
        self._writer.writerow([step, repr(decision.j_current), j_t, decision.lane_switch, repr(decision.u_d)])
