"""High-level choreographer: a recurrent policy that picks which subtask expert runs next.

Trained with synchronous advantage actor-critic: a pool of workers collects
rollouts against a frozen parameter snapshot, then one update aggregates them.
Every rollout draws from its own seeded generator and results are reduced in
rollout order, so the learning curve does not depend on thread scheduling.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import env as kenv
from .ddpg import CurvePoint
from .env import GOAL_DIM, OBS_DIM, EnvConfig
from .errors import ConfigurationError, ContractViolation, NumericError
from .nn import Adam, GruPolicy, softmax
from .subtasks import (
    CANONICAL_SEQUENCE,
    MAX_SEQUENCE,
    SUBTASK_ORDER,
    SUBTASKS,
    Policy,
    episode_seeds,
    run_subtask,
)

HLC_OBS_DIM = OBS_DIM + GOAL_DIM + 1
N_CHOICES = len(SUBTASK_ORDER)
# env-step allowance: twice the nominal task length (six selections of a third each)
HLC_STEP_CAP = 50 * MAX_SEQUENCE // 3


def hlc_reward(final_success: bool, terminal: bool) -> float:
    return 1.0 if (terminal and final_success) else 0.0


def compute_gae(rewards: Sequence[float], values: Sequence[float], gamma: float, lam: float,
                terminal: bool = True) -> np.ndarray:
    """Generalized advantage estimates for one trajectory.

    ``values`` has one more entry than ``rewards``; the last is the bootstrap
    value, treated as zero when ``terminal``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.array(values, dtype=np.float64)
    if v.shape != (r.size + 1,):
        raise ContractViolation("values must have exactly one more entry than rewards")
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ContractViolation("gamma and lambda must lie in [0, 1]")
    if terminal:
        v[-1] = 0.0
    deltas = r + gamma * v[1:] - v[:-1]
    adv = np.empty_like(deltas)
    acc = 0.0
    for t in range(r.size - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        adv[t] = acc
    return adv


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    out = np.empty(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def hlc_observation(config: EnvConfig, state: kenv.EnvState, selection: int) -> np.ndarray:
    obs = kenv.observe(config, state, state.goal, "object").observation
    return np.concatenate([obs, state.goal, [selection / MAX_SEQUENCE]])


def new_hlc_policy(rng: np.random.Generator | int = 0, hidden_dim: int = 64) -> GruPolicy:
    return GruPolicy(HLC_OBS_DIM, hidden_dim, N_CHOICES, rng=np.random.default_rng(rng)
                     if not isinstance(rng, np.random.Generator) else rng)


def hlc_policy_step(policy: GruPolicy, obs: np.ndarray, hidden: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    """Distribution over the three subtasks, state value and next hidden state."""
    logits, value, h = policy.step(obs, hidden)
    return softmax(logits), value, h


@dataclass
class HlcTrajectory:
    observations: np.ndarray
    choices: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray
    success: bool
    env_steps: int

    def __len__(self) -> int:
        return len(self.choices)

    @property
    def sequence(self) -> tuple[str, ...]:
        return tuple(SUBTASK_ORDER[c] for c in self.choices)


def check_lse_policies(lse_policies: Mapping[str, Policy | None]) -> None:
    missing = [n for n in SUBTASK_ORDER if lse_policies.get(n) is None]
    if missing:
        raise ConfigurationError(f"missing trained subtask experts: {', '.join(missing)}")


def run_hlc_episode(
    policy: GruPolicy,
    lse_policies: Mapping[str, Policy],
    env_config: EnvConfig,
    rng: np.random.Generator | int,
    greedy: bool = False,
    forced: Sequence[str] | None = None,
) -> HlcTrajectory:
    """Let the choreographer sequence subtask experts until success or a cap is hit.

    Each selected expert runs deterministically for its budget (cut short if the
    env-step allowance runs out). ``forced`` overrides the choices, for
    evaluating fixed sequences.
    """
    check_lse_policies(lse_policies)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    cfg = replace(env_config, episode_length=HLC_STEP_CAP)
    state = kenv.reset(cfg, np.random.default_rng(int(rng.integers(2**31 - 1))))
    hidden = policy.initial_hidden()
    xs, choices, logps, values = [], [], [], []
    success = False
    for k in range(MAX_SEQUENCE):
        if forced is not None and k >= len(forced):
            break
        x = hlc_observation(cfg, state, k)
        probs, value, hidden = hlc_policy_step(policy, x, hidden)
        if forced is not None:
            choice = SUBTASK_ORDER.index(forced[k])
        elif greedy:
            choice = int(np.argmax(probs))
        else:
            choice = int(rng.choice(N_CHOICES, p=probs))
        name = SUBTASK_ORDER[choice]
        budget = min(SUBTASKS[name].budget, cfg.episode_length - state.step_count)
        state, _ = run_subtask(lse_policies[name], name, cfg, state, budget=budget)
        xs.append(x)
        choices.append(choice)
        logps.append(float(np.log(max(probs[choice], 1e-300))))
        values.append(value)
        success = bool(kenv.is_success(state.obj, state.goal, cfg.success_threshold))
        if success or state.step_count >= cfg.episode_length:
            break
    n = len(choices)
    terminals = np.zeros(n, dtype=bool)
    rewards = np.zeros(n)
    if n:
        terminals[-1] = True
        rewards[-1] = hlc_reward(success, True)
    return HlcTrajectory(np.array(xs).reshape(n, HLC_OBS_DIM), np.array(choices, dtype=np.int64),
                         np.array(logps), np.array(values), rewards, terminals, success, state.step_count)


@dataclass
class GaeConfig:
    gamma: float = 0.99
    lam: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    workers: int = 4
    rollouts_per_update: int = 16

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ContractViolation("gamma and lambda must lie in [0, 1]")
        if self.workers < 1 or self.rollouts_per_update < 1:
            raise ContractViolation("workers and rollouts per update must be positive")


@dataclass
class HlcTrainConfig:
    gae: GaeConfig = field(default_factory=GaeConfig)
    lr: float = 3e-3
    max_grad_norm: float = 0.5
    hidden_dim: int = 64
    normalize_advantages: bool = True
    eval_every: int = 50
    eval_episodes: int = 100
    target_success: float = 0.95
    target_sequence: float = 0.95
    max_env_steps: int = 600_000

    def __post_init__(self):
        if isinstance(self.gae, dict):
            self.gae = GaeConfig(**self.gae)
        if min(self.eval_every, self.eval_episodes, self.max_env_steps, self.hidden_dim) <= 0:
            raise ContractViolation("HLC counts must be positive")


@dataclass
class HlcCurvePoint(CurvePoint):
    sequence_accuracy: float = 0.0


@dataclass
class HlcTrainResult:
    policy: GruPolicy
    curve: list[HlcCurvePoint]
    converged: bool
    env_steps: int
    updates: int


def normalize(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def a2c_loss_and_grad(
    policy: GruPolicy, trajectories: Sequence[HlcTrajectory], gae: GaeConfig, normalize_advantages: bool = True,
) -> tuple[float, np.ndarray, dict[str, float]]:
    """Aggregate actor-critic loss and gradient over a batch of finished trajectories.

    Loss, averaged over all decision steps in the batch:
    -A log pi(u|s) - c_ent * H(pi(.|s)) + c_v * (R - v)^2.
    """
    advs, rets = [], []
    for tr in trajectories:
        advs.append(compute_gae(tr.rewards, np.append(tr.values, 0.0), gae.gamma, gae.lam))
        rets.append(discounted_returns(tr.rewards, gae.gamma))
    adv_all = np.concatenate(advs)
    if normalize_advantages and adv_all.size > 1:
        adv_all = normalize(adv_all)
    n_steps = adv_all.size
    grads = np.zeros_like(policy.params)
    actor_loss = critic_loss = entropy = 0.0
    offset = 0
    for tr, ret in zip(trajectories, rets):
        T = len(tr)
        adv = adv_all[offset:offset + T]
        offset += T
        logits, values = policy.forward_sequence(tr.observations)
        probs = softmax(logits)
        logp_all = np.log(np.maximum(probs, 1e-300))
        logp = logp_all[np.arange(T), tr.choices]
        ent = -(probs * logp_all).sum(axis=1)
        actor_loss -= float(adv @ logp)
        entropy += float(ent.sum())
        critic_loss += float(((ret - values) ** 2).sum())
        onehot = np.eye(N_CHOICES)[tr.choices]
        d_actor = -adv[:, None] * (onehot - probs)
        d_entropy = gae.entropy_coef * probs * (logp_all + ent[:, None])
        d_value = 2.0 * gae.value_coef * (values - ret)
        grads += policy.backward_sequence((d_actor + d_entropy) / n_steps, d_value / n_steps)
    actor_loss /= n_steps
    critic_loss /= n_steps
    entropy /= n_steps
    loss = actor_loss - gae.entropy_coef * entropy + gae.value_coef * critic_loss
    if not np.isfinite(loss) or not np.all(np.isfinite(grads)):
        raise NumericError(f"HLC loss diverged (actor={actor_loss}, critic={critic_loss}, entropy={entropy})")
    return loss, grads, {"actor": actor_loss, "critic": critic_loss, "entropy": entropy}


def clip_grad_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grads))
    if max_norm > 0 and norm > max_norm:
        return grads * (max_norm / norm)
    return grads


def evaluate_hlc(
    policy: GruPolicy,
    lse_policies: Mapping[str, Policy],
    env_config: EnvConfig,
    seeds: Sequence[int],
) -> tuple[float, float]:
    """Greedy (success rate, fraction of episodes choosing exactly the canonical sequence)."""
    wins = exact = 0
    for s in seeds:
        tr = run_hlc_episode(policy, lse_policies, env_config, s, greedy=True)
        wins += tr.success
        exact += tr.sequence == tuple(CANONICAL_SEQUENCE)
    return wins / len(seeds), exact / len(seeds)


def _rollout_seeds(seed: int, update: int, n: int) -> list[int]:
    ss = np.random.SeedSequence([seed, update])
    return [int(c.generate_state(1)[0]) for c in ss.spawn(n)]


def train_hlc(
    env_config: EnvConfig,
    lse_policies: Mapping[str, Policy],
    config: HlcTrainConfig | None = None,
    seed: int = 0,
    on_eval: Callable[[HlcCurvePoint, bool, GruPolicy], None] | None = None,
) -> HlcTrainResult:
    """Train the choreographer over frozen subtask experts.

    Env steps on the curve count every step spent inside rollouts.
    """
    config = config or HlcTrainConfig()
    check_lse_policies(lse_policies)
    gae = config.gae
    root = np.random.SeedSequence(seed)
    init_ss, eval_ss = root.spawn(2)
    policy = new_hlc_policy(np.random.default_rng(init_ss), config.hidden_dim)
    opt = Adam(policy.n_params, lr=config.lr)
    eval_rng = np.random.default_rng(eval_ss)
    start = time.perf_counter()
    steps = updates = 0
    curve: list[HlcCurvePoint] = []
    best_key, best_policy, converged = (-1.0, -1.0), policy.copy(), False
    pool = ThreadPoolExecutor(max_workers=gae.workers) if gae.workers > 1 else None
    try:
        while steps < config.max_env_steps:
            snapshot = policy.copy()
            seeds = _rollout_seeds(seed, updates, gae.rollouts_per_update)

            def rollout(s: int) -> HlcTrajectory:
                return run_hlc_episode(snapshot, lse_policies, env_config, s)

            trajs = list(pool.map(rollout, seeds)) if pool else [rollout(s) for s in seeds]
            steps += sum(t.env_steps for t in trajs)
            _, grads, _ = a2c_loss_and_grad(policy, trajs, gae, config.normalize_advantages)
            opt.step(policy.params, clip_grad_norm(grads, config.max_grad_norm))
            updates += 1
            if updates % config.eval_every:
                continue
            ev_seeds = episode_seeds(eval_rng, config.eval_episodes)
            success, seq_acc = evaluate_hlc(policy, lse_policies, env_config, ev_seeds)
            point = HlcCurvePoint(steps, success, time.perf_counter() - start, seq_acc)
            curve.append(point)
            improved = (success, seq_acc) >= best_key
            if improved:
                best_key, best_policy = (success, seq_acc), policy.copy()
            if on_eval is not None:
                on_eval(point, improved, policy)
            if success >= config.target_success and seq_acc >= config.target_sequence:
                converged = True
                break
    finally:
        if pool:
            pool.shutdown()
    return HlcTrainResult(best_policy, curve, converged, steps, updates)
