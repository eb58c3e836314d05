"""Parameterised soft actor-critic for the hybrid stay/change + acceleration action.

The policy emits three squashed Gaussian dimensions: the acceleration and one
weight per discrete action. The discrete choice is the argmax of the weights
(ties keep the lane). Critics, value and policy follow the value-network
flavour of SAC with twin soft-Q functions and a Polyak-averaged target value.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import sim as simulator
from .nn import AdamState, Mlp, adam_step, gaussian_head, gaussian_head_backward, load_checkpoint, save_checkpoint
from .sim import HybridAction, Observation, SimConfig

log = logging.getLogger(__name__)

OBS_DIM = 10
ACT_DIM = 3
SPEED_SCALE = 25.0
ACCEL_SCALE = 5.0
NET_NAMES = ("policy", "q1", "q2", "value", "value_target")
CURVE_COLUMNS = ("env_step", "episode_index", "episode_return", "episode_length", "collided")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class PasacHyper:
    gamma: float = 0.99
    tau: float = 0.005
    alpha: float = 0.05
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    batch_size: int = 128
    learning_starts: int = 500
    total_steps: int = 300_000
    buffer_size: int = 10_000
    hidden: tuple[int, ...] = (256, 256)

    def validate(self) -> "PasacHyper":
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.batch_size < 1 or self.buffer_size < self.batch_size:
            raise ValueError("batch_size must be in [1, buffer_size]")
        return self


def obs_scale(config: SimConfig) -> np.ndarray:
    g = config.sensing_range
    return np.array([g, g, g, g, SPEED_SCALE, SPEED_SCALE, SPEED_SCALE, ACCEL_SCALE, SPEED_SCALE, SPEED_SCALE])


def normalize_obs(obs: Observation, config: SimConfig | None = None) -> np.ndarray:
    """Gaps / sensing range, speeds / 25 m/s, acceleration / 5 m/s^2."""
    config = config or SimConfig()
    return obs.to_array() / obs_scale(config)


def action_bounds(config: SimConfig):
    return np.array([config.a_min, 0.0, 0.0]), np.array([config.a_max, 1.0, 1.0])


@dataclass
class NetworkBundle:
    policy: Mlp
    q1: Mlp
    q2: Mlp
    value: Mlp
    value_target: Mlp

    @classmethod
    def create(cls, hidden=(256, 256), seed=0, activation="relu") -> "NetworkBundle":
        rng = np.random.default_rng(seed)
        hidden = list(hidden)
        value = Mlp([OBS_DIM, *hidden, 1], activation, rng)
        return cls(
            policy=Mlp([OBS_DIM, *hidden, 2 * ACT_DIM], activation, rng),
            q1=Mlp([OBS_DIM + ACT_DIM, *hidden, 1], activation, rng),
            q2=Mlp([OBS_DIM + ACT_DIM, *hidden, 1], activation, rng),
            value=value,
            value_target=value.copy(),
        )

    def nets(self) -> dict:
        return {name: getattr(self, name) for name in NET_NAMES}

    def save(self, path) -> None:
        save_checkpoint(self.nets(), path)

    @classmethod
    def load(cls, path) -> "NetworkBundle":
        nets = load_checkpoint(path)
        missing = [n for n in NET_NAMES if n not in nets]
        if missing:
            from .nn import CheckpointError

            raise CheckpointError(f"{path}: checkpoint lacks networks {missing}")
        return cls(**{n: nets[n] for n in NET_NAMES})


@dataclass
class Batch:
    obs: np.ndarray  # normalised, (B, 10)
    act: np.ndarray  # raw (a_cont, k0, k1), (B, 3)
    rew: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray  # float 0/1

    def __len__(self):
        return len(self.rew)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions."""

    def __init__(self, capacity=10_000):
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, OBS_DIM))
        self.act = np.zeros((self.capacity, ACT_DIM))
        self.rew = np.zeros(self.capacity)
        self.next_obs = np.zeros((self.capacity, OBS_DIM))
        self.terminal = np.zeros(self.capacity)
        self.ptr = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, obs, act, rew, next_obs, terminal) -> None:
        if not math.isfinite(rew):
            raise ValueError("non-finite reward")
        i = self.ptr
        self.obs[i] = obs
        self.act[i] = act
        self.rew[i] = rew
        self.next_obs[i] = next_obs
        self.terminal[i] = float(terminal)
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def order(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.ptr) % self.capacity

    def _take(self, idx) -> Batch:
        return Batch(self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.terminal[idx])

    def items(self) -> Batch:
        return self._take(self.order())

    def sample(self, batch_size, rng) -> Batch:
        if batch_size > self.size:
            raise ValueError("not enough transitions to sample a batch")
        return self._take(rng.choice(self.size, size=batch_size, replace=False))


def _policy_sample(bundle, obs_n, noise, bounds):
    out, cache = bundle.policy.forward(obs_n)
    sample = gaussian_head(out[..., :ACT_DIM], out[..., ACT_DIM:], noise, *bounds)
    return sample, cache


def select_action(bundle: NetworkBundle, obs: Observation, deterministic: bool, rng, config: SimConfig | None = None):
    config = config or SimConfig()
    noise = np.zeros(ACT_DIM) if deterministic else rng.standard_normal(ACT_DIM)
    sample, _ = _policy_sample(bundle, normalize_obs(obs, config), noise, action_bounds(config))
    a = sample.action
    return HybridAction.from_weights(a[0], a[1], a[2])


def _q_input(obs_n, act):
    return np.concatenate([obs_n, act], axis=-1)


def q_loss(bundle: NetworkBundle, batch: Batch, hyper: PasacHyper):
    """Twin soft-Q Bellman residual; returns (loss, grads_q1, grads_q2)."""
    B = len(batch)
    v_next = bundle.value_target(batch.next_obs)[:, 0]
    target = batch.rew + hyper.gamma * (1.0 - batch.terminal) * v_next
    x = _q_input(batch.obs, batch.act)
    loss = 0.0
    grads = []
    for q in (bundle.q1, bundle.q2):
        pred, cache = q.forward(x)
        resid = pred[:, 0] - target
        loss += 0.5 * np.mean(0.5 * resid * resid)
        g, _ = q.backward(cache, (0.5 * resid / B)[:, None])
        grads.append(g)
    return float(loss), grads[0], grads[1]


@dataclass
class _Sampled:
    sample: object
    policy_cache: dict
    q_caches: tuple
    q_values: tuple
    q_min: np.ndarray
    pick_first: np.ndarray


def sample_and_evaluate(bundle: NetworkBundle, obs_n, noise, bounds) -> _Sampled:
    """Draw reparameterised actions and evaluate both critics on them."""
    sample, pcache = _policy_sample(bundle, obs_n, noise, bounds)
    x = _q_input(obs_n, sample.action)
    q1, c1 = bundle.q1.forward(x)
    q2, c2 = bundle.q2.forward(x)
    q1, q2 = q1[:, 0], q2[:, 0]
    pick = q1 <= q2
    return _Sampled(sample, pcache, (c1, c2), (q1, q2), np.where(pick, q1, q2), pick)


def v_loss(bundle, batch, hyper, rng=None, noise=None, config=None, sampled=None):
    """Soft value regression towards min-twin Q minus alpha * log pi."""
    config = config or SimConfig()
    if sampled is None:
        if noise is None:
            noise = rng.standard_normal((len(batch), ACT_DIM))
        sampled = sample_and_evaluate(bundle, batch.obs, noise, action_bounds(config))
    target = sampled.q_min - hyper.alpha * sampled.sample.log_prob
    pred, cache = bundle.value.forward(batch.obs)
    resid = pred[:, 0] - target
    loss = float(np.mean(0.5 * resid * resid))
    grads, _ = bundle.value.backward(cache, (resid / len(batch))[:, None])
    return loss, grads


def policy_loss(bundle, batch, hyper, rng=None, noise=None, config=None, sampled=None):
    """mean[alpha * log pi(a|s) - min(Q1, Q2)(s, a)] with a reparameterised."""
    config = config or SimConfig()
    B = len(batch)
    if sampled is None:
        if noise is None:
            noise = rng.standard_normal((B, ACT_DIM))
        sampled = sample_and_evaluate(bundle, batch.obs, noise, action_bounds(config))
    s = sampled.sample
    loss = float(np.mean(hyper.alpha * s.log_prob - sampled.q_min))
    # d loss / d Q_min = -1/B, routed to whichever critic was smaller
    g_out = np.full(B, -1.0 / B)
    g1 = np.where(sampled.pick_first, g_out, 0.0)[:, None]
    g2 = np.where(sampled.pick_first, 0.0, g_out)[:, None]
    _, gx1 = bundle.q1.backward(sampled.q_caches[0], g1, need_param_grads=False)
    _, gx2 = bundle.q2.backward(sampled.q_caches[1], g2, need_param_grads=False)
    g_action = (gx1 + gx2)[:, OBS_DIM:]
    g_mean, g_log_std = gaussian_head_backward(s, g_action, np.full(B, hyper.alpha / B))
    grads, _ = bundle.policy.backward(sampled.policy_cache, np.concatenate([g_mean, g_log_std], axis=1))
    return loss, grads


def soft_update(target: Mlp, source: Mlp, tau: float) -> None:
    """target <- tau * source + (1 - tau) * target, in place."""
    if target.flat.shape != source.flat.shape:
        raise ValueError("soft_update shape mismatch")
    target.flat *= 1.0 - tau
    target.flat += tau * source.flat
    target.touch()


@dataclass
class Optimizers:
    policy: AdamState
    q1: AdamState
    q2: AdamState
    value: AdamState

    @classmethod
    def create(cls, bundle: NetworkBundle, hyper: PasacHyper) -> "Optimizers":
        return cls(
            policy=AdamState.for_params(bundle.policy.flat, hyper.actor_lr),
            q1=AdamState.for_params(bundle.q1.flat, hyper.critic_lr),
            q2=AdamState.for_params(bundle.q2.flat, hyper.critic_lr),
            value=AdamState.for_params(bundle.value.flat, hyper.critic_lr),
        )


def update(bundle, opt: Optimizers, batch, hyper, rng, config) -> dict:
    """One gradient step on every network followed by the target blend.

    All gradients are taken at the pre-update parameters.
    """
    noise = rng.standard_normal((len(batch), ACT_DIM))
    lq, gq1, gq2 = q_loss(bundle, batch, hyper)
    sampled = sample_and_evaluate(bundle, batch.obs, noise, action_bounds(config))
    lv, gv = v_loss(bundle, batch, hyper, sampled=sampled)
    lp, gp = policy_loss(bundle, batch, hyper, sampled=sampled)
    losses = {"q": lq, "v": lv, "pi": lp}
    if not all(math.isfinite(x) for x in losses.values()):
        raise TrainingDiverged(f"non-finite loss {losses}")
    for net, grads, state in ((bundle.q1, gq1, opt.q1), (bundle.q2, gq2, opt.q2),
                              (bundle.value, gv, opt.value), (bundle.policy, gp, opt.policy)):
        adam_step(net.flat, net.flatten(grads), state)
        net.touch()
    soft_update(bundle.value_target, bundle.value, hyper.tau)
    return losses


@dataclass
class TrainResult:
    bundle: NetworkBundle
    curve: list = field(default_factory=list)
    buffer: ReplayBuffer | None = None
    updates: int = 0
    wall_seconds: float = 0.0


def train(
    sim_config: SimConfig,
    hyper: PasacHyper,
    seed: int,
    bundle: NetworkBundle | None = None,
    total_steps: int | None = None,
    diagnostic_path=None,
    log_every: int = 10_000,
) -> TrainResult:
    """Interleave environment steps and gradient steps (one each after warm-up).

    Fully determined by ``seed``. Only collisions are stored as terminal; the
    step cap and the road end bootstrap through the target value.
    """
    hyper.validate()
    sim_config.validate()
    total_steps = hyper.total_steps if total_steps is None else int(total_steps)
    rng = np.random.default_rng([seed, 0])
    env_rng = np.random.default_rng([seed, 1])
    bundle = bundle or NetworkBundle.create(hyper.hidden, seed=seed)
    opt = Optimizers.create(bundle, hyper)
    buffer = ReplayBuffer(hyper.buffer_size)
    scale = obs_scale(sim_config)
    bounds = action_bounds(sim_config)
    result = TrainResult(bundle, buffer=buffer)
    t0 = time.perf_counter()

    state = simulator.reset(sim_config, int(env_rng.integers(2**32)))
    obs = simulator.observe(state).to_array() / scale
    ep_return, ep_len, episode = 0.0, 0, 0
    for env_step in range(1, total_steps + 1):
        sample, _ = _policy_sample(bundle, obs, rng.standard_normal(ACT_DIM), bounds)
        a = sample.action
        res = simulator.step(state, HybridAction.from_weights(a[0], a[1], a[2]))
        next_obs = res.observation.to_array() / scale
        buffer.push(obs, a, res.reward.total, next_obs, res.collided)
        ep_return += res.reward.total
        ep_len += 1
        obs = next_obs

        if env_step > hyper.learning_starts and len(buffer) >= hyper.batch_size:
            batch = buffer.sample(hyper.batch_size, rng)
            try:
                update(bundle, opt, batch, hyper, rng, sim_config)
            except (TrainingDiverged, FloatingPointError) as exc:
                if diagnostic_path is not None:
                    bundle.save(diagnostic_path)
                raise TrainingDiverged(f"step {env_step}: {exc}") from exc
            result.updates += 1

        if res.done:
            result.curve.append((env_step, episode, ep_return, ep_len, int(res.collided)))
            episode += 1
            ep_return, ep_len = 0.0, 0
            state = simulator.reset(sim_config, int(env_rng.integers(2**32)))
            obs = simulator.observe(state).to_array() / scale
        if log_every and env_step % log_every == 0:
            recent = result.curve[-20:]
            mean_ret = np.mean([r[2] for r in recent]) if recent else float("nan")
            log.info("step %d episodes %d recent return %.1f (%.0fs)", env_step, episode, mean_ret,
                     time.perf_counter() - t0)
    result.wall_seconds = time.perf_counter() - t0
    return result


def write_curve(rows, stream) -> None:
    import csv

    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CURVE_COLUMNS)
    for env_step, episode, ret, length, collided in rows:
        writer.writerow([env_step, episode, repr(float(ret)), length, collided])
