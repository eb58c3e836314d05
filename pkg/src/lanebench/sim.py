"""Two-lane kinematic traffic simulator used as the lane-change environment.

Vehicles are point masses with a fixed length. Surrounding vehicles follow the
Intelligent Driver Model and never change lanes; the ego is driven by a
hybrid action (acceleration plus stay/change decision). Lane changes are
instantaneous.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from typing import TextIO

import numpy as np

OBS_FIELDS = ("d_p", "d_f", "d_tp", "d_tf", "v_tp", "v_tf", "v_ego", "a_ego", "v_p", "v_f")
TRACE_COLUMNS = ("step", "ego_lane", "ego_s", "ego_v", "ego_a", "jerk", "d_p", "reward_total")


class SimError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    road_length: float = 1000.0
    lane_count: int = 2
    lane_width: float = 3.2
    dt: float = 0.1
    a_min: float = -4.5
    a_max: float = 2.6
    v_safe: float = 13.89
    d_safe: float = 25.0
    r_collision: float = -200.0
    w0: float = 3.13
    w1: float = 0.5
    w2: float = 0.4
    w3: float = 0.72
    w4: float = 0.5
    flow_density: float = 0.11
    sensing_range: float = 150.0
    vehicle_length: float = 5.0
    ego_init_speed: float = 13.89
    leader_init_speed: float = 12.89
    leader_init_gap: float = 25.0
    spawn_buffer: float = 50.0
    max_steps: int = 700
    # surrounding-vehicle IDM
    idm_headway: float = 1.5
    idm_min_gap: float = 2.5
    idm_comfort_brake: float = 2.0
    idm_max_accel: float = 1.0
    idm_exponent: float = 4.0
    # simulator-side safety in the style of SUMO defaults: the ego speed is capped at the
    # Krauss safe speed, and a requested lane change only executes into safe gaps
    safe_speed_guard: bool = True
    lane_change_guard: bool = True
    guard_tau: float = 1.0
    guard_min_gap: float = 2.5

    def validate(self) -> "SimConfig":
        problems = []
        if self.lane_count != 2:
            problems.append("lane_count must be 2")
        if not self.a_min < 0 < self.a_max:
            problems.append("a_min < 0 < a_max violated")
        if self.dt <= 0:
            problems.append("dt must be positive")
        if self.d_safe <= self.vehicle_length:
            problems.append("d_safe must exceed vehicle_length")
        for name in ("w0", "w1", "w2", "w3", "w4"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be non-negative")
        if self.flow_density < 0 or self.flow_density * self.dt >= 1:
            problems.append("flow_density*dt must lie in [0, 1)")
        if self.r_collision > 0:
            problems.append("r_collision must be non-positive")
        if self.max_steps < 1:
            problems.append("max_steps must be >= 1")
        if self.sensing_range <= 0 or self.road_length <= self.spawn_buffer:
            problems.append("sensing_range/road_length out of range")
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, float) and not math.isfinite(value):
                problems.append(f"{f.name} must be finite")
        if problems:
            raise SimError("invalid SimConfig: " + "; ".join(problems))
        return self


@dataclass
class VehicleState:
    id: int
    lane: int
    s: float
    v: float
    a: float = 0.0
    a_prev: float = 0.0
    is_ego: bool = False
    desired_speed: float = 0.0

    def as_tuple(self):
        return (self.id, self.lane, self.s, self.v, self.a, self.a_prev, self.is_ego, self.desired_speed)


@dataclass(frozen=True)
class Observation:
    d_p: float
    d_f: float
    d_tp: float
    d_tf: float
    v_tp: float
    v_tf: float
    v_ego: float
    a_ego: float
    v_p: float
    v_f: float

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in OBS_FIELDS], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "Observation":
        return cls(*(float(x) for x in arr))


@dataclass(frozen=True)
class RewardBreakdown:
    r_act: float
    r_act1: float
    r_act2: float
    r_collision_term: float
    total: float


@dataclass(frozen=True)
class HybridAction:
    """Ego command: acceleration, stay/change weights and the resolved choice."""

    a_cont: float
    k_weights: tuple[float, float] = (1.0, 0.0)
    discrete: int = 0

    @classmethod
    def from_weights(cls, a_cont: float, k0: float, k1: float) -> "HybridAction":
        return cls(float(a_cont), (float(k0), float(k1)), 1 if k1 > k0 else 0)

    @classmethod
    def keep(cls, a_cont: float) -> "HybridAction":
        return cls(float(a_cont), (1.0, 0.0), 0)

    @classmethod
    def change(cls, a_cont: float) -> "HybridAction":
        return cls(float(a_cont), (0.0, 1.0), 1)

    def to_array(self) -> np.ndarray:
        return np.array([self.a_cont, self.k_weights[0], self.k_weights[1]], dtype=np.float64)


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    reward: RewardBreakdown
    collided: bool
    reached_end: bool
    truncated: bool

    @property
    def done(self) -> bool:
        return self.collided or self.reached_end or self.truncated


@dataclass
class SimState:
    config: SimConfig
    rng: np.random.Generator
    vehicles: list[VehicleState] = field(default_factory=list)
    ego_id: int = 0
    next_id: int = 1
    steps: int = 0
    done: bool = False
    lane_changes: int = 0

    @property
    def ego(self) -> VehicleState:
        for veh in self.vehicles:
            if veh.id == self.ego_id:
                return veh
        raise SimError("ego vehicle missing")

    def snapshot(self):
        """Hashable, complete description of the state (including the RNG)."""
        rng_state = self.rng.bit_generator.state
        return (
            tuple(v.as_tuple() for v in self.vehicles),
            self.ego_id,
            self.next_id,
            self.steps,
            self.done,
            self.lane_changes,
            repr(rng_state),
        )


def idm_acceleration(v, desired_speed, gap, dv, config: SimConfig) -> float:
    """IDM acceleration; ``gap`` is bumper-to-bumper, ``dv`` = v - v_leader.

    ``gap=None`` gives the free-road term.
    """
    a = config.idm_max_accel
    free = 1.0 - (v / max(desired_speed, 1e-6)) ** config.idm_exponent
    if gap is None:
        acc = a * free
    else:
        s_star = config.idm_min_gap + max(
            0.0, v * config.idm_headway + v * dv / (2.0 * math.sqrt(a * config.idm_comfort_brake))
        )
        if gap <= 0.0:
            return config.a_min
        acc = a * (free - (s_star / gap) ** 2)
    return min(max(acc, config.a_min), config.a_max)


def npc_accel(follower: VehicleState, leader: VehicleState | None, config: SimConfig) -> float:
    if follower.is_ego:
        raise SimError("npc_accel is not defined for the ego vehicle")
    if leader is None:
        return idm_acceleration(follower.v, follower.desired_speed, None, 0.0, config)
    gap = leader.s - follower.s - config.vehicle_length
    if gap >= config.sensing_range:
        return idm_acceleration(follower.v, follower.desired_speed, None, 0.0, config)
    return idm_acceleration(follower.v, follower.desired_speed, gap, follower.v - leader.v, config)


def krauss_safe_speed(gap: float, v_leader: float, decel: float, tau: float) -> float:
    """Highest speed from which the follower can still stop behind a braking leader."""
    g = max(gap, 0.0)
    bt = decel * tau
    return -bt + math.sqrt(bt * bt + v_leader * v_leader + 2.0 * decel * g)


def guarded_accel(sim: SimState, a_cmd: float) -> float:
    cfg = sim.config
    ego = sim.ego
    leader, _ = neighbours(sim.vehicles, ego, ego.lane)
    if leader is None:
        return a_cmd
    gap = leader.s - ego.s - cfg.vehicle_length - cfg.guard_min_gap
    if gap >= cfg.sensing_range:
        return a_cmd
    v_max = krauss_safe_speed(gap, leader.v, -cfg.a_min, cfg.guard_tau)
    return max(min(a_cmd, (v_max - ego.v) / cfg.dt), cfg.a_min)


def _gap_is_safe(gap: float, v_follower: float, v_leader: float, cfg: SimConfig) -> bool:
    if gap < cfg.guard_min_gap:
        return False
    return v_follower <= krauss_safe_speed(gap - cfg.guard_min_gap, v_leader, -cfg.a_min, cfg.guard_tau)


def lane_change_is_safe(sim: SimState, lane: int) -> bool:
    """Both the ego behind its new leader and the new follower behind the ego can still stop."""
    cfg = sim.config
    ego = sim.ego
    ahead, behind = neighbours(sim.vehicles, ego, lane)
    L = cfg.vehicle_length
    if ahead is not None and not _gap_is_safe(ahead.s - ego.s - L, ego.v, ahead.v, cfg):
        return False
    if behind is not None and not _gap_is_safe(ego.s - behind.s - L, behind.v, ego.v, cfg):
        return False
    return True


def advance(s: float, v: float, a: float, dt: float) -> tuple[float, float, float]:
    """Exact constant-acceleration update; returns (s', v', a_applied).

    When the speed would go negative the vehicle stops at the end of the
    step and the applied acceleration becomes -v/dt.
    """
    v_new = v + a * dt
    if v_new < 0.0:
        a = -v / dt
        v_new = 0.0
    return s + v * dt + 0.5 * a * dt * dt, v_new, a


def _lane_sorted(vehicles, lane):
    return sorted((v for v in vehicles if v.lane == lane), key=lambda v: (v.s, v.id))


def neighbours(vehicles, ego: VehicleState, lane: int):
    """Nearest vehicle ahead (s >= ego.s) and behind in ``lane``, excluding the ego."""
    ahead = behind = None
    for veh in vehicles:
        if veh.id == ego.id or veh.lane != lane:
            continue
        if veh.s >= ego.s:
            if ahead is None or (veh.s, veh.id) < (ahead.s, ahead.id):
                ahead = veh
        elif behind is None or (veh.s, veh.id) > (behind.s, behind.id):
            behind = veh
    return ahead, behind


def _gap_and_speed(raw_gap, speed, config):
    if raw_gap is None or raw_gap >= config.sensing_range:
        return config.sensing_range, config.v_safe
    return min(max(raw_gap, 0.0), config.sensing_range), speed


def observe(sim: SimState) -> Observation:
    cfg = sim.config
    ego = sim.ego
    L = cfg.vehicle_length
    values = {}
    for prefix, lane in (("", ego.lane), ("t", 1 - ego.lane)):
        ahead, behind = neighbours(sim.vehicles, ego, lane)
        d_ahead, v_ahead = _gap_and_speed(
            None if ahead is None else ahead.s - ego.s - L, None if ahead is None else ahead.v, cfg
        )
        d_behind, v_behind = _gap_and_speed(
            None if behind is None else ego.s - behind.s - L, None if behind is None else behind.v, cfg
        )
        values[f"d_{prefix}p"], values[f"v_{prefix}p"] = d_ahead, v_ahead
        values[f"d_{prefix}f"], values[f"v_{prefix}f"] = d_behind, v_behind
    return Observation(
        d_p=values["d_p"],
        d_f=values["d_f"],
        d_tp=values["d_tp"],
        d_tf=values["d_tf"],
        v_tp=values["v_tp"],
        v_tf=values["v_tf"],
        v_ego=ego.v,
        a_ego=ego.a,
        v_p=values["v_p"],
        v_f=values["v_f"],
    )


def compute_reward(
    prev_d_p: float,
    obs: Observation,
    y_prev: float,
    y: float,
    jerk: float,
    collided: bool,
    config: SimConfig,
) -> RewardBreakdown:
    """Per-step reward.

    The lane-change penalty is skipped while the previous gap to the leader
    already met ``d_safe``. Gap terms use the sentinel-clamped observation.
    """
    r_act = 0.0 if prev_d_p >= config.d_safe else -config.w0 * abs(y - y_prev)
    r_act1 = (
        -config.w1 * abs(obs.d_p - config.d_safe)
        - config.w2 * abs(obs.d_f - config.d_safe)
        - config.w3 * abs(obs.v_ego - config.v_safe)
    )
    r_act2 = -config.w4 * abs(jerk)
    r_col = config.r_collision if collided else 0.0
    return RewardBreakdown(r_act, r_act1, r_act2, r_col, r_act + r_act1 + r_act2 + r_col)


def detect_collision(sim: SimState) -> bool:
    """True iff the ego overlaps any vehicle in its lane (gap strictly < 0)."""
    ego = sim.ego
    return any(
        veh.id != ego.id and veh.lane == ego.lane and abs(veh.s - ego.s) - sim.config.vehicle_length < 0.0
        for veh in sim.vehicles
    )


def any_collision(vehicles, vehicle_length) -> bool:
    for lane in (0, 1):
        row = _lane_sorted(vehicles, lane)
        for back, front in zip(row, row[1:]):
            if front.s - back.s - vehicle_length < 0.0:
                return True
    return False


def _update_npc_accels(sim: SimState) -> None:
    cfg = sim.config
    for lane in (0, 1):
        row = _lane_sorted(sim.vehicles, lane)
        for i, veh in enumerate(row):
            if veh.is_ego:
                continue
            leader = row[i + 1] if i + 1 < len(row) else None
            veh.a_prev = veh.a
            veh.a = npc_accel(veh, leader, cfg)


def _preseed(sim: SimState) -> None:
    """Place initial traffic as a spatial Poisson process matching the flow.

    Per-lane spatial rate is (flow/2) / mean speed; candidates that would sit
    closer than d_safe to an already placed vehicle in the lane are dropped.
    """
    cfg = sim.config
    rng = sim.rng
    if cfg.flow_density <= 0:
        return
    mean_speed = 0.9 * cfg.v_safe
    rate = 0.5 * cfg.flow_density / mean_speed
    clearance = cfg.d_safe + cfg.vehicle_length
    for lane in (0, 1):
        s = rng.exponential(1.0 / rate)
        while s < cfg.road_length - cfg.vehicle_length:
            speed = float(rng.uniform(0.8, 1.0) * cfg.v_safe)
            if all(abs(v.s - s) > clearance for v in sim.vehicles if v.lane == lane):
                sim.vehicles.append(VehicleState(sim.next_id, lane, float(s), speed, desired_speed=speed))
                sim.next_id += 1
            s += rng.exponential(1.0 / rate)


def reset(config: SimConfig, seed: int) -> SimState:
    config.validate()
    sim = SimState(config=config, rng=np.random.default_rng(seed))
    ego = VehicleState(0, 0, config.spawn_buffer, config.ego_init_speed, is_ego=True,
                       desired_speed=config.v_safe)
    leader_s = config.spawn_buffer + config.vehicle_length + config.leader_init_gap
    leader = VehicleState(1, 0, leader_s, config.leader_init_speed,
                          desired_speed=config.leader_init_speed)
    sim.vehicles = [ego, leader]
    sim.ego_id, sim.next_id = 0, 2
    _preseed(sim)
    _update_npc_accels(sim)
    return sim


def spawn_step(sim: SimState, rng: np.random.Generator | None = None) -> SimState:
    cfg = sim.config
    p = cfg.flow_density * cfg.dt
    if p <= 0:
        return sim
    rng = sim.rng if rng is None else rng
    if rng.random() >= p:
        return sim
    lane = int(rng.integers(0, 2))
    speed = float(rng.uniform(0.8, 1.0) * cfg.v_safe)
    in_lane = [v.s for v in sim.vehicles if v.lane == lane]
    if in_lane and min(in_lane) - cfg.vehicle_length <= cfg.d_safe:
        return sim
    veh = VehicleState(sim.next_id, lane, 0.0, speed, desired_speed=speed)
    sim.next_id += 1
    sim.vehicles.append(veh)
    leader, _ = neighbours(sim.vehicles, veh, lane)
    veh.a = npc_accel(veh, leader, cfg)
    return sim


def step(sim: SimState, action: HybridAction) -> StepResult:
    if sim.done:
        raise SimError("cannot step a terminal simulation; call reset")
    cfg = sim.config
    ego = sim.ego
    prev_d_p = observe(sim).d_p
    lane_prev = ego.lane
    if action.discrete == 1 and (not cfg.lane_change_guard or lane_change_is_safe(sim, 1 - ego.lane)):
        ego.lane = 1 - ego.lane
        sim.lane_changes += 1
    ego.a_prev = ego.a
    ego.a = min(max(float(action.a_cont), cfg.a_min), cfg.a_max)
    if cfg.safe_speed_guard:
        ego.a = guarded_accel(sim, ego.a)

    for veh in sim.vehicles:
        veh.s, veh.v, veh.a = advance(veh.s, veh.v, veh.a, cfg.dt)
    sim.vehicles = [v for v in sim.vehicles if v.is_ego or v.s <= cfg.road_length]
    spawn_step(sim)
    _update_npc_accels(sim)
    sim.steps += 1

    collided = detect_collision(sim)
    reached_end = (not collided) and ego.s > cfg.road_length
    truncated = (not collided) and (not reached_end) and sim.steps >= cfg.max_steps
    obs = observe(sim)
    jerk = (ego.a - ego.a_prev) / cfg.dt
    reward = compute_reward(
        prev_d_p, obs, lane_prev * cfg.lane_width, ego.lane * cfg.lane_width, jerk, collided, cfg
    )
    sim.done = collided or reached_end or truncated
    return StepResult(obs, reward, collided, reached_end, truncated)


def ego_jerk(sim: SimState) -> float:
    ego = sim.ego
    return (ego.a - ego.a_prev) / sim.config.dt


class TraceWriter:
    """Writes one CSV row per simulation step."""

    def __init__(self, stream: TextIO):
        self._writer = csv.writer(stream, lineterminator="\n")
        self._writer.writerow(TRACE_COLUMNS)

    def write(self, sim: SimState, result: StepResult) -> None:
        ego = sim.ego
        self._writer.writerow(
            [
                sim.steps,
                ego.lane,
                repr(ego.s),
                repr(ego.v),
                repr(ego.a),
                repr(ego_jerk(sim)),
                repr(result.observation.d_p),
                repr(result.reward.total),
            ]
        )


def with_density(config: SimConfig, density: float) -> SimConfig:
    return replace(config, flow_density=density).validate()
