import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lanebench import sim
from lanebench.sim import (
    HybridAction,
    Observation,
    SimConfig,
    SimError,
    VehicleState,
    advance,
    compute_reward,
    detect_collision,
    npc_accel,
    observe,
    reset,
    spawn_step,
    step,
)

CFG = SimConfig()


def lone_ego(v=13.89, lane=0, s=100.0, **overrides):
    cfg = SimConfig(flow_density=0.0, **overrides)
    state = reset(cfg, 0)
    state.vehicles = [v_ for v_ in state.vehicles if v_.is_ego]
    ego = state.ego
    ego.v, ego.lane, ego.s = v, lane, s
    return state


def add(state, lane, s, v, a=0.0):
    veh = VehicleState(state.next_id, lane, s, v, a=a, desired_speed=v)
    state.next_id += 1
    state.vehicles.append(veh)
    return veh


# reset


def test_reset_initial_speeds():
    state = reset(CFG, 7)
    ego = state.ego
    leaders = [v for v in state.vehicles if v.lane == 0 and v.s > ego.s]
    leader = min(leaders, key=lambda v: v.s)
    assert ego.v == 13.89 and ego.lane == 0 and ego.s == CFG.spawn_buffer
    assert leader.v == 12.89


def test_reset_is_deterministic():
    assert reset(CFG, 7).snapshot() == reset(CFG, 7).snapshot()
    assert reset(CFG, 7).snapshot() != reset(CFG, 8).snapshot()


def test_zero_density_has_only_ego_and_leader():
    state = reset(SimConfig(flow_density=0.0), 3)
    assert len(state.vehicles) == 2
    assert sum(v.is_ego for v in state.vehicles) == 1


def test_preseeded_traffic_is_collision_free():
    for seed in range(20):
        state = reset(SimConfig(flow_density=0.2), seed)
        assert not sim.any_collision(state.vehicles, CFG.vehicle_length)
        assert all(0 <= v.s <= CFG.road_length for v in state.vehicles)


@pytest.mark.parametrize(
    "bad",
    [dict(a_min=0.5), dict(a_max=-1.0), dict(dt=0.0), dict(d_safe=4.0), dict(w2=-0.1), dict(flow_density=10.0)],
)
def test_reset_rejects_invalid_config(bad):
    with pytest.raises(SimError):
        reset(SimConfig(**bad), 0)


# spawning


def test_spawn_probability_arithmetic():
    assert CFG.flow_density * CFG.dt == pytest.approx(0.011, abs=1e-15)


def test_spawn_rate_matches_probability():
    state = lone_ego(s=900.0)
    state.config = SimConfig(flow_density=0.11)
    rng = np.random.default_rng(1)
    n = 20000
    spawned = 0
    for _ in range(n):
        before = len(state.vehicles)
        spawn_step(state, rng)
        if len(state.vehicles) > before:
            spawned += 1
            state.vehicles = [v for v in state.vehicles if v.is_ego]
    # binomial(20000, 0.011): mean 220, sd ~14.8
    assert abs(spawned - 220) < 5 * 14.8


def test_spawn_zero_density_is_noop():
    state = reset(SimConfig(flow_density=0.0), 0)
    before = state.snapshot()
    spawn_step(state)
    assert state.snapshot() == before


class _AlwaysRng:
    def __init__(self, lane):
        self.lane = lane

    def random(self):
        return 0.0

    def integers(self, lo, hi):
        return self.lane

    def uniform(self, lo, hi):
        return lo


@pytest.mark.parametrize("lane", [0, 1])
def test_spawn_gap_guard(lane):
    state = lone_ego(s=500.0)
    state.config = SimConfig(flow_density=0.11)
    add(state, lane, 10.0, 12.0)
    n = len(state.vehicles)
    spawn_step(state, _AlwaysRng(lane))
    assert len(state.vehicles) == n


def test_spawn_enters_at_origin_with_speed_in_range():
    state = lone_ego(s=500.0)
    state.config = SimConfig(flow_density=0.11)
    spawn_step(state, _AlwaysRng(1))
    new = state.vehicles[-1]
    assert (new.lane, new.s) == (1, 0.0)
    assert 0.8 * CFG.v_safe <= new.v <= CFG.v_safe


# car following


def test_idm_equilibrium_with_far_leader():
    f = VehicleState(1, 0, 0.0, 12.0, desired_speed=12.0)
    lead = VehicleState(2, 0, CFG.sensing_range + CFG.vehicle_length, 12.0, desired_speed=12.0)
    assert abs(npc_accel(f, lead, CFG)) < 0.01


def test_idm_saturates_at_zero_gap():
    f = VehicleState(1, 0, 0.0, 12.0, desired_speed=12.0)
    lead = VehicleState(2, 0, CFG.vehicle_length + 1e-6, 12.0, desired_speed=12.0)
    assert npc_accel(f, lead, CFG) == CFG.a_min


def test_idm_free_road_from_standstill_accelerates():
    f = VehicleState(1, 0, 0.0, 0.0, desired_speed=12.0)
    assert npc_accel(f, None, CFG) == pytest.approx(CFG.idm_max_accel)


def test_npc_accel_rejects_ego():
    with pytest.raises(SimError):
        npc_accel(VehicleState(0, 0, 0.0, 1.0, is_ego=True), None, CFG)


# stepping


def test_exact_kinematics_example():
    state = lone_ego(v=10.0)
    s0 = state.ego.s
    step(state, HybridAction.keep(1.0))
    assert state.ego.v == pytest.approx(10.1, abs=1e-12)
    assert state.ego.s - s0 == pytest.approx(1.005, abs=1e-12)


def test_speed_never_negative_example():
    state = lone_ego(v=0.2)
    step(state, HybridAction.keep(-4.5))
    assert state.ego.v == 0.0


def test_lane_change_is_instantaneous():
    state = lone_ego()
    res = step(state, HybridAction.change(0.0))
    assert state.ego.lane == 1
    assert state.ego.lane * CFG.lane_width == pytest.approx(3.2)
    assert res.observation.d_p == CFG.sensing_range


def test_action_is_clamped():
    state = lone_ego(v=5.0)
    step(state, HybridAction.keep(50.0))
    assert state.ego.a == CFG.a_max
    step(state, HybridAction.keep(-50.0))
    assert state.ego.a == CFG.a_min


def test_stepping_terminal_state_is_rejected():
    state = reset(SimConfig(max_steps=1, flow_density=0.0), 0)
    res = step(state, HybridAction.keep(0.0))
    assert res.truncated and res.done
    with pytest.raises(SimError):
        step(state, HybridAction.keep(0.0))


def test_vehicles_past_road_end_despawn():
    state = lone_ego(s=10.0)
    add(state, 1, CFG.road_length - 0.5, 10.0)
    step(state, HybridAction.keep(0.0))
    assert len(state.vehicles) == 1


def test_reaching_road_end_terminates():
    state = lone_ego(s=CFG.road_length - 0.5, v=10.0)
    res = step(state, HybridAction.keep(0.0))
    assert res.reached_end and not res.collided and res.done


def test_collision_terminates_with_penalty():
    state = lone_ego(s=100.0, v=10.0, safe_speed_guard=False, lane_change_guard=False)
    add(state, 1, 102.0, 10.0)
    res = step(state, HybridAction.change(0.0))
    assert res.collided and not res.reached_end
    assert res.reward.r_collision_term == -200.0
    assert res.reward.total <= -200.0


def test_lane_change_guard_refuses_unsafe_gap():
    state = lone_ego(s=100.0, v=10.0)
    add(state, 1, 102.0, 10.0)
    res = step(state, HybridAction.change(0.0))
    assert state.ego.lane == 0 and state.lane_changes == 0
    assert not res.collided


def test_lane_change_guard_refuses_fast_follower():
    state = lone_ego(s=100.0, v=5.0)
    add(state, 1, 85.0, 20.0)
    step(state, HybridAction.change(0.0))
    assert state.ego.lane == 0 and state.lane_changes == 0


def test_lane_change_guard_allows_safe_gap():
    state = lone_ego(s=100.0, v=10.0)
    add(state, 1, 160.0, 10.0)
    add(state, 1, 40.0, 10.0)
    step(state, HybridAction.change(0.0))
    assert state.ego.lane == 1 and state.lane_changes == 1


def test_guard_prevents_rear_end_collision():
    state = lone_ego(s=100.0, v=13.89)
    lead = add(state, 0, 120.0, 5.0)
    lead.desired_speed = 5.0
    for _ in range(200):
        res = step(state, HybridAction.keep(CFG.a_max))
        assert not res.collided
        if res.done:
            break


def test_without_guard_command_is_applied_verbatim():
    state = lone_ego(s=100.0, v=13.89, safe_speed_guard=False)
    add(state, 0, 110.0, 0.0)
    step(state, HybridAction.keep(1.0))
    assert state.ego.a == 1.0


# observation


def test_observe_gap_definition():
    state = lone_ego(s=100.0)
    add(state, 0, 130.0, 12.0)
    assert observe(state).d_p == 25.0


def test_observe_alone_gives_sentinels():
    state = lone_ego(v=7.5)
    obs = observe(state)
    assert obs.to_array().tolist() == [150, 150, 150, 150, 13.89, 13.89, 7.5, 0.0, 13.89, 13.89]


def test_observe_target_follower_pass_through():
    state = lone_ego(s=100.0)
    add(state, 1, 100.0 - 5.0 - 12.3, 11.0)
    obs = observe(state)
    assert obs.d_tf == pytest.approx(12.3, abs=1e-12)
    assert obs.v_tf == 11.0


def test_observe_vehicle_beyond_sensing_range_is_absent():
    state = lone_ego(s=100.0)
    add(state, 0, 100.0 + 5.0 + 151.0, 9.0)
    obs = observe(state)
    assert (obs.d_p, obs.v_p) == (150.0, 13.89)


def test_observation_roundtrip():
    arr = np.arange(10.0)
    assert np.array_equal(Observation.from_array(arr).to_array(), arr)


# reward


def _obs(d_p=25.0, d_f=25.0, v=13.89):
    return Observation(d_p, d_f, 150.0, 150.0, 13.89, 13.89, v, 0.0, 13.89, 13.89)


def test_reward_all_setpoints_met():
    r = compute_reward(25.0, _obs(), 0.0, 0.0, 0.0, False, CFG)
    assert r.total == 0.0


def test_reward_gap_deficit():
    r = compute_reward(25.0, _obs(d_p=20.0), 0.0, 0.0, 0.0, False, CFG)
    assert r.r_act1 == pytest.approx(-2.5, abs=1e-9)


def test_reward_lane_change_penalty():
    r = compute_reward(20.0, _obs(), 0.0, 3.2, 0.0, False, CFG)
    assert r.r_act == pytest.approx(-10.016, abs=1e-9)


def test_reward_lane_change_gated_by_previous_gap():
    r = compute_reward(25.0, _obs(), 0.0, 3.2, 0.0, False, CFG)
    assert r.r_act == 0.0


def test_reward_collision():
    r = compute_reward(25.0, _obs(), 0.0, 0.0, 0.0, True, CFG)
    assert r.r_collision_term == -200.0 and r.total == -200.0


def test_reward_jerk_term():
    r = compute_reward(25.0, _obs(), 0.0, 0.0, 10.0, False, CFG)
    assert r.r_act2 == pytest.approx(-5.0)


# collision detection


def test_collision_overlap():
    state = lone_ego(s=100.0)
    add(state, 0, 104.0, 10.0)
    assert detect_collision(state)


def test_no_collision_across_lanes():
    state = lone_ego(s=100.0)
    add(state, 1, 100.0, 10.0)
    assert not detect_collision(state)


def test_zero_gap_is_not_a_collision():
    state = lone_ego(s=100.0)
    add(state, 0, 105.0, 10.0)
    assert not detect_collision(state)


# properties

finite_speed = st.floats(0.0, 40.0, allow_nan=False)
accel = st.floats(-4.5, 2.6, allow_nan=False)


@given(v=finite_speed, a=accel, dt=st.floats(0.01, 1.0))
def test_advance_is_exact_when_speed_stays_non_negative(v, a, dt):
    s1, v1, a1 = advance(10.0, v, a, dt)
    if v + a * dt >= 0:
        assert v1 == pytest.approx(v + a * dt, rel=1e-12, abs=1e-12)
        assert s1 - 10.0 == pytest.approx(v * dt + 0.5 * a * dt * dt, rel=1e-12, abs=1e-12)
        assert a1 == a
    else:
        assert v1 == 0.0
        assert s1 >= 10.0


actions = st.lists(
    st.tuples(st.floats(-10, 10, allow_nan=False), st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=80
)


def _rollout(cfg, seed, seq):
    out = io.StringIO()
    writer = sim.TraceWriter(out)
    state = reset(cfg, seed)
    results = []
    for a, k0, k1 in seq:
        if state.done:
            break
        prev_lane = state.ego.lane
        res = step(state, HybridAction.from_weights(a, k0, k1))
        writer.write(state, res)
        results.append((state, res, prev_lane))
    return out.getvalue(), results


@given(seed=st.integers(0, 2**31), seq=actions, density=st.sampled_from([0.0, 0.11, 0.3]))
def test_step_invariants(seed, seq, density):
    cfg = SimConfig(flow_density=density)
    _, results = _rollout(cfg, seed, seq)
    for state, res, prev_lane in results:
        ego = state.ego
        assert all(v.v >= 0 for v in state.vehicles)
        assert cfg.a_min <= ego.a <= cfg.a_max
        r = res.reward
        assert r.total == r.r_act + r.r_act1 + r.r_act2 + r.r_collision_term
        assert max(r.r_act, r.r_act1, r.r_act2, r.r_collision_term) <= 0.0
        arr = res.observation.to_array()
        assert arr.shape == (10,) and np.isfinite(arr).all()
        assert (arr[:4] >= 0).all() and (arr[:4] <= cfg.sensing_range).all()
        y = ego.lane * cfg.lane_width
        assert y in (0.0, cfg.lane_width)
        assert sum([res.collided, res.reached_end]) <= 1
        assert all(0 <= v.s <= cfg.road_length for v in state.vehicles if not v.is_ego)


@given(seed=st.integers(0, 2**31), seq=actions)
def test_identical_inputs_give_identical_traces(seed, seq):
    assert _rollout(CFG, seed, seq)[0] == _rollout(CFG, seed, seq)[0]


@given(
    prev_d_p=st.floats(25.0, 150.0),
    d_p=st.floats(0, 150),
    d_f=st.floats(0, 150),
    v=st.floats(0, 40),
    jerk=st.floats(-100, 100),
    change=st.booleans(),
)
def test_lane_change_gate(prev_d_p, d_p, d_f, v, jerk, change):
    r = compute_reward(prev_d_p, _obs(d_p, d_f, v), 0.0, 3.2 if change else 0.0, jerk, False, CFG)
    assert r.r_act == 0.0
    assert r.total <= 0.0 and math.isfinite(r.total)
