"""Goal-conditioned DDPG with hindsight relabeling, and the per-subtask training loop."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import env as kenv
from .env import ACTION_DIM, GOAL_DIM, OBS_DIM, EnvConfig
from .errors import ContractViolation, NumericError
from .nn import Adam, Mlp, MlpSpec, polyak_average
from .policy import ActorPolicy, InputNormalizer, actor_spec
from .subtasks import (
    END_TO_END,
    SUBTASK_ORDER,
    Policy,
    SubtaskSpec,
    constrain_action,
    evaluate_policies,
    episode_seeds,
    get_subtask,
    oracle_policies,
    run_subtask,
    subgoal_for,
)

@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    ag: np.ndarray
    sg: np.ndarray
    s_next: np.ndarray
    ag_next: np.ndarray


class ReplayBuffer:
    """Ring buffer of fixed-length episodes stored as (T+1)-step arrays."""

    def __init__(self, episode_length: int, capacity: int = 10_000):
        self.T = int(episode_length)
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, self.T + 1, OBS_DIM))
        self.ag = np.zeros((self.capacity, self.T + 1, GOAL_DIM))
        self.goal = np.zeros((self.capacity, self.T, GOAL_DIM))
        self.action = np.zeros((self.capacity, self.T, ACTION_DIM))
        self.size = 0
        self.next_slot = 0
        self.episode_ids = np.full(self.capacity, -1)
        self.stored = 0

    @property
    def n_transitions(self) -> int:
        return self.size * self.T

    def store_arrays(self, obs, ag, goal, action) -> None:
        if len(action) == 0:
            raise ContractViolation("cannot store an empty episode")
        if np.shape(action) != (self.T, ACTION_DIM) or np.shape(obs) != (self.T + 1, OBS_DIM):
            raise ContractViolation(f"episode must have exactly {self.T} transitions")
        i = self.next_slot
        self.obs[i], self.ag[i], self.goal[i], self.action[i] = obs, ag, goal, action
        self.episode_ids[i] = self.stored
        self.stored += 1
        self.next_slot = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def store_episode(self, episode: Sequence[Transition]) -> None:
        if len(episode) == 0:
            raise ContractViolation("cannot store an empty episode")
        obs = np.array([tr.s for tr in episode] + [episode[-1].s_next])
        ag = np.array([tr.ag for tr in episode] + [episode[-1].ag_next])
        self.store_arrays(obs, ag, np.array([tr.sg for tr in episode]), np.array([tr.a for tr in episode]))


@dataclass
class Batch:
    obs: np.ndarray
    action: np.ndarray
    goal: np.ndarray
    reward: np.ndarray
    obs_next: np.ndarray
    ag_next: np.ndarray
    done: np.ndarray
    episode: np.ndarray
    t: np.ndarray
    future_t: np.ndarray
    relabeled: np.ndarray


def sample_with_her(
    buffer: ReplayBuffer,
    batch_size: int,
    k_future: int,
    rng: np.random.Generator,
    reward_fn: Callable = kenv.compute_reward,
) -> Batch:
    """Sample transitions with replacement; relabel a k/(k+1) share with future achieved goals."""
    if buffer.size == 0:
        raise ContractViolation("cannot sample from an empty replay buffer")
    T = buffer.T
    ep = rng.integers(0, buffer.size, size=batch_size)
    t = rng.integers(0, T, size=batch_size)
    p_relabel = 1.0 - 1.0 / (1.0 + k_future)
    relabel = rng.random(batch_size) < p_relabel
    future = t + np.floor(rng.random(batch_size) * (T - t)).astype(int)
    goal = buffer.goal[ep, t].copy()
    goal[relabel] = buffer.ag[ep[relabel], future[relabel] + 1]
    ag_next = buffer.ag[ep, t + 1]
    reward = reward_fn(ag_next, goal)
    return Batch(
        obs=buffer.obs[ep, t], action=buffer.action[ep, t], goal=goal, reward=reward,
        obs_next=buffer.obs[ep, t + 1], ag_next=ag_next, done=np.zeros(batch_size, dtype=bool),
        episode=ep, t=t, future_t=np.where(relabel, future, t), relabeled=relabel,
    )


@dataclass
class DdpgConfig:
    gamma: float = 0.98
    polyak: float = 0.95
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    noise_std: float = 0.2
    random_eps: float = 0.3
    action_l2: float = 0.3
    hidden_dims: tuple[int, ...] = (256, 256, 256)
    clip_return: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ContractViolation("gamma must lie in (0, 1)")
        self.hidden_dims = tuple(self.hidden_dims)


class DdpgAgent:
    def __init__(self, config: DdpgConfig | None = None, rng: np.random.Generator | int = 0):
        self.config = config or DdpgConfig()
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        c = self.config
        dtype = np.dtype(c.dtype).type
        self.actor = Mlp(actor_spec(c.hidden_dims), rng, dtype=dtype)
        self.critic = Mlp(MlpSpec(OBS_DIM + GOAL_DIM + ACTION_DIM, 1, c.hidden_dims, "none"), rng, dtype=dtype)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(self.actor.params.size, lr=c.actor_lr, dtype=dtype)
        self.critic_opt = Adam(self.critic.params.size, lr=c.critic_lr, dtype=dtype)
        self.normalizer = InputNormalizer()

    @property
    def policy(self) -> ActorPolicy:
        return ActorPolicy(self.actor, self.normalizer)

    def select_action(self, observation: np.ndarray, goal: np.ndarray, explore: bool,
                      rng: np.random.Generator | None = None) -> np.ndarray:
        a = self.actor.forward(self.normalizer(observation, goal), cache=False)
        if not explore:
            return a
        a = np.clip(a + self.config.noise_std * rng.standard_normal(ACTION_DIM), -1.0, 1.0)
        if rng.random() < self.config.random_eps:
            a = rng.uniform(-1.0, 1.0, size=ACTION_DIM)
        return a

    def update_targets(self) -> None:
        r = self.config.polyak
        self.actor_target.params[:] = polyak_average(self.actor_target.params, self.actor.params, r)
        self.critic_target.params[:] = polyak_average(self.critic_target.params, self.critic.params, r)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "actor": self.actor.params, "critic": self.critic.params,
            "actor_target": self.actor_target.params, "critic_target": self.critic_target.params,
            **self.actor_opt.state_arrays("actor_opt"), **self.critic_opt.state_arrays("critic_opt"),
            **self.normalizer.state_arrays(),
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in ("actor", "critic", "actor_target", "critic_target"):
            net = getattr(self, name)
            net.load_params(np.asarray(arrays[name], dtype=net.dtype))
        self.actor_opt.load_state_arrays(arrays, "actor_opt")
        self.critic_opt.load_state_arrays(arrays, "critic_opt")
        self.normalizer.load_state_arrays(arrays)


def critic_target(batch: Batch, agent: DdpgAgent) -> np.ndarray:
    """Bootstrapped targets r + gamma * Q'(s', pi'(s')), clipped to [-1/(1-gamma), 0]."""
    c = agent.config
    x_next = agent.normalizer(batch.obs_next, batch.goal)
    a_next = agent.actor_target.forward(x_next, cache=False)
    q_next = agent.critic_target.forward(np.concatenate([x_next, a_next], axis=-1), cache=False)[..., 0]
    y = batch.reward + c.gamma * q_next * (1.0 - batch.done)
    if c.clip_return:
        y = np.clip(y, -1.0 / (1.0 - c.gamma), 0.0)
    return y


def critic_loss_and_grad(agent: DdpgAgent, batch: Batch, y: np.ndarray) -> tuple[float, np.ndarray]:
    x = agent.normalizer(batch.obs, batch.goal)
    q = agent.critic.forward(np.concatenate([x, batch.action], axis=-1))[..., 0]
    err = q - y
    n = len(y)
    grads, _ = agent.critic.backward((2.0 / n * err)[:, None])
    return float(np.mean(err * err)), grads


def actor_loss_and_grad(agent: DdpgAgent, batch: Batch) -> tuple[float, np.ndarray]:
    """-mean Q(s, pi(s)) + action_l2 * mean(preactivation^2)."""
    x = agent.normalizer(batch.obs, batch.goal)
    a = agent.actor.forward(x)
    pre = agent.actor.output_preactivation
    q = agent.critic.forward(np.concatenate([x, a], axis=-1))[..., 0]
    n = len(q)
    _, dx = agent.critic.backward(np.full((n, 1), -1.0 / n), param_grads=False)
    da = dx[:, -ACTION_DIM:]
    l2 = agent.config.action_l2
    grads, _ = agent.actor.backward(da, preact_grad=l2 * 2.0 * pre / pre.size)
    return float(-q.mean() + l2 * np.mean(pre * pre)), grads


def ddpg_update(agent: DdpgAgent, batch: Batch) -> tuple[float, float]:
    """One critic and one actor Adam step; target networks are updated separately."""
    y = critic_target(batch, agent)
    closs, cgrad = critic_loss_and_grad(agent, batch, y)
    if not np.isfinite(closs):
        raise NumericError("critic loss is not finite")
    agent.critic_opt.step(agent.critic.params, cgrad)
    aloss, agrad = actor_loss_and_grad(agent, batch)
    if not np.isfinite(aloss):
        raise NumericError("actor loss is not finite")
    agent.actor_opt.step(agent.actor.params, agrad)
    return closs, aloss


@dataclass
class LseTrainConfig:
    update_every: int = 300
    batches_per_update: int = 40
    batch_size: int = 256
    k_future: int = 4
    epoch_steps: int = 15_000
    eval_episodes: int = 100
    target_success: float = 1.0
    max_env_steps: int = 150_000
    buffer_episodes: int = 10_000
    fixed_eval_seeds: bool = False
    ddpg: DdpgConfig = field(default_factory=DdpgConfig)

    def __post_init__(self):
        counts = (self.update_every, self.batches_per_update, self.batch_size, self.epoch_steps,
                  self.eval_episodes, self.max_env_steps, self.buffer_episodes)
        if min(counts) <= 0 or self.k_future < 0:
            raise ContractViolation("training counts must be positive")
        if self.epoch_steps % self.update_every:
            raise ContractViolation("epoch length must be a multiple of the update cadence")
        if isinstance(self.ddpg, dict):
            self.ddpg = DdpgConfig(**self.ddpg)


@dataclass
class CurvePoint:
    env_steps: int
    success_rate: float
    wall_seconds: float


@dataclass
class TrainResult:
    policy: ActorPolicy
    curve: list[CurvePoint]
    converged: bool
    env_steps: int
    agent: object = None

    @property
    def steps_to_target(self) -> int | None:
        return self.curve[-1].env_steps if self.converged else None


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def train_lse(
    env_config: EnvConfig,
    subtask: str | SubtaskSpec,
    config: LseTrainConfig | None = None,
    seed: int = 0,
    agent: DdpgAgent | None = None,
    others: Mapping[str, Policy] | None = None,
    on_eval: Callable[[CurvePoint, bool, DdpgAgent], None] | None = None,
) -> TrainResult:
    """Train one subtask expert with DDPG+HER.

    Preceding subtasks run under ``others`` (oracles by default) to reach the
    subtask's start state; only the subtask window is stored. Every
    ``epoch_steps`` env steps the deterministic policy is scored with the
    composite protocol and ``on_eval(point, improved, agent)`` is called.
    """
    config = config or LseTrainConfig()
    spec = get_subtask(subtask)
    env_rng, explore_rng, sample_rng, eval_rng, init_rng = _streams(seed, 5)
    agent = agent or DdpgAgent(config.ddpg, init_rng)
    helpers = dict(oracle_policies(env_config))
    if others:
        helpers.update(others)
    prefix = [] if spec is END_TO_END else list(SUBTASK_ORDER[:spec.index])
    buffer = ReplayBuffer(spec.budget, config.buffer_episodes)
    eval_seeds = episode_seeds(eval_rng, config.eval_episodes) if config.fixed_eval_seeds else None

    def evaluate() -> float:
        seeds = eval_seeds or episode_seeds(eval_rng, config.eval_episodes)
        policy = agent.policy
        if spec is END_TO_END:
            return evaluate_policies({"e2e": policy}, env_config, seeds, ["e2e"])
        return evaluate_policies({**helpers, spec.name: policy}, env_config, seeds)

    start = time.perf_counter()
    steps, next_update, next_eval = 0, config.update_every, config.epoch_steps
    curve: list[CurvePoint] = []
    best_success, best_policy = -1.0, agent.policy.frozen_copy()
    converged = False
    T = spec.budget
    while steps < config.max_env_steps:
        state = kenv.reset(env_config, env_rng)
        for name in prefix:
            state, _ = run_subtask(helpers[name], name, env_config, state)
        goal = subgoal_for(spec, state)
        obs = np.zeros((T + 1, OBS_DIM))
        ag = np.zeros((T + 1, GOAL_DIM))
        acts = np.zeros((T, ACTION_DIM))
        for t in range(T):
            o = kenv.observe(env_config, state, goal, spec.achieved)
            obs[t], ag[t] = o.observation, o.achieved_goal
            acts[t] = constrain_action(spec, agent.select_action(o.observation, goal, True, explore_rng))
            state = kenv.step(env_config, state, acts[t])
        o = kenv.observe(env_config, state, goal, spec.achieved)
        obs[T], ag[T] = o.observation, o.achieved_goal
        goals = np.repeat(goal[None], T, axis=0)
        buffer.store_arrays(obs, ag, goals, acts)
        agent.normalizer.update(obs, np.concatenate([goals, ag]))
        steps += state.step_count

        while steps >= next_update:
            for _ in range(config.batches_per_update):
                batch = sample_with_her(buffer, config.batch_size, config.k_future, sample_rng)
                ddpg_update(agent, batch)
            agent.update_targets()
            next_update += config.update_every

        if steps >= next_eval:
            next_eval += config.epoch_steps
            success = evaluate()
            point = CurvePoint(steps, success, time.perf_counter() - start)
            curve.append(point)
            improved = success >= best_success
            if improved:
                best_success, best_policy = success, agent.policy.frozen_copy()
            if on_eval is not None:
                on_eval(point, improved, agent)
            if success >= config.target_success:
                converged = True
                break
    return TrainResult(best_policy, curve, converged, steps, agent)


def train_end_to_end(
    env_config: EnvConfig,
    config: LseTrainConfig | None = None,
    seed: int = 0,
    on_eval: Callable[[CurvePoint, bool, DdpgAgent], None] | None = None,
) -> TrainResult:
    """Same learner on the whole 50-step task: goal = task goal, achieved = object position."""
    return train_lse(env_config, END_TO_END, config, seed, on_eval=on_eval)
