"""Behavior-cloning baseline: regress the actor onto oracle demonstrations."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import env as kenv
from .ddpg import CurvePoint, TrainResult, _streams
from .env import ACTION_DIM, GOAL_DIM, OBS_DIM, EnvConfig
from .errors import ContractViolation, NumericError
from .nn import Adam, Mlp
from .policy import ActorPolicy, InputNormalizer, actor_spec
from .subtasks import (
    SUBTASK_ORDER,
    Policy,
    SubtaskSpec,
    constrain_action,
    episode_seeds,
    evaluate_policies,
    get_subtask,
    oracle_action,
    oracle_policies,
    run_subtask,
    subgoal_for,
)


@dataclass
class DemoDataset:
    observations: np.ndarray
    goals: np.ndarray
    actions: np.ndarray
    env_steps: int = 0
    seeds: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)

    def extend(self, other: "DemoDataset") -> "DemoDataset":
        return DemoDataset(
            np.concatenate([self.observations, other.observations]),
            np.concatenate([self.goals, other.goals]),
            np.concatenate([self.actions, other.actions]),
            self.env_steps + other.env_steps, self.seeds + other.seeds,
        )

    @classmethod
    def empty(cls) -> "DemoDataset":
        return cls(np.zeros((0, OBS_DIM)), np.zeros((0, GOAL_DIM)), np.zeros((0, ACTION_DIM)))


def collect_demos(
    subtask: str | SubtaskSpec,
    n_episodes: int,
    env_config: EnvConfig,
    rng: np.random.Generator | int,
) -> DemoDataset:
    """Record the subtask window under oracle control, preceding subtasks also oracle-driven."""
    spec = get_subtask(subtask)
    oracles = oracle_policies(env_config)
    obs, goals, acts, seeds = [], [], [], episode_seeds(rng, n_episodes)
    steps = 0
    for seed in seeds:
        state = kenv.reset(env_config, np.random.default_rng(seed))
        for name in SUBTASK_ORDER[:spec.index]:
            state, _ = run_subtask(oracles[name], name, env_config, state)
        goal = subgoal_for(spec, state)
        for _ in range(spec.budget):
            o = kenv.observe(env_config, state, goal, spec.achieved)
            a = constrain_action(spec, oracle_action(spec, state, env_config))
            obs.append(o.observation)
            goals.append(goal)
            acts.append(a)
            state = kenv.step(env_config, state, a)
        steps += state.step_count
    return DemoDataset(np.array(obs), np.array(goals), np.array(acts), steps, seeds)


DEMO_HEADER = ([f"obs_{i}" for i in range(OBS_DIM)] + ["goal_x", "goal_y", "goal_z"]
               + [f"action_{i}" for i in range(ACTION_DIM)])


def save_demos_csv(dataset: DemoDataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DEMO_HEADER)
        for o, g, a in zip(dataset.observations, dataset.goals, dataset.actions):
            w.writerow([repr(float(v)) for v in (*o, *g, *a)])
    return path


def load_demos_csv(path: str | Path) -> DemoDataset:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return DemoDataset(data[:, :OBS_DIM], data[:, OBS_DIM:OBS_DIM + GOAL_DIM], data[:, OBS_DIM + GOAL_DIM:])


@dataclass
class BcTrainConfig:
    demos_per_round: int = 100
    batch_size: int = 256
    epochs_per_round: int = 20
    lr: float = 1e-3
    epoch_steps: int = 15_000
    eval_episodes: int = 100
    target_success: float = 1.0
    max_env_steps: int = 150_000
    hidden_dims: tuple[int, ...] = (256, 256, 256)

    def __post_init__(self):
        if min(self.demos_per_round, self.batch_size, self.epochs_per_round, self.epoch_steps,
               self.eval_episodes, self.max_env_steps) <= 0:
            raise ContractViolation("BC counts must be positive")
        self.hidden_dims = tuple(self.hidden_dims)


def new_bc_policy(config: BcTrainConfig, rng: np.random.Generator) -> ActorPolicy:
    return ActorPolicy(Mlp(actor_spec(config.hidden_dims), rng, dtype=np.float32), InputNormalizer())


def fit_bc(policy: ActorPolicy, dataset: DemoDataset, epochs: int, batch_size: int,
           opt: Adam, rng: np.random.Generator) -> float:
    """Minibatch MSE regression of the actor onto demonstrated actions; returns the last epoch's loss."""
    if len(dataset) == 0:
        raise ContractViolation("cannot fit on an empty demonstration set")
    x_all = policy.normalizer(dataset.observations, dataset.goals)
    n = len(dataset)
    loss = float("nan")
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            out = policy.actor.forward(x_all[idx])
            err = out - dataset.actions[idx]
            batch_loss = float(np.mean(err * err))
            if not np.isfinite(batch_loss):
                raise NumericError("behavior-cloning loss is not finite")
            grads, _ = policy.actor.backward(2.0 * err / err.size)
            opt.step(policy.actor.params, grads)
            total += batch_loss * len(idx)
        loss = total / n
    return loss


def bc_loss(policy: ActorPolicy, dataset: DemoDataset) -> float:
    out = policy.actor.forward(policy.normalizer(dataset.observations, dataset.goals), cache=False)
    return float(np.mean((out - dataset.actions) ** 2))


def train_bc_lse(
    env_config: EnvConfig,
    subtask: str | SubtaskSpec,
    config: BcTrainConfig | None = None,
    seed: int = 0,
    others: Mapping[str, Policy] | None = None,
    on_eval: Callable[[CurvePoint, bool, ActorPolicy], None] | None = None,
) -> TrainResult:
    """Alternate demonstration rounds and regression, scoring with the composite protocol.

    Demonstration env steps (including the oracle-driven lead-in) are counted on
    the same axis as DDPG+HER's interaction steps.
    """
    config = config or BcTrainConfig()
    spec = get_subtask(subtask)
    demo_rng, fit_rng, eval_rng, init_rng = _streams(seed, 4)
    policy = new_bc_policy(config, init_rng)
    opt = Adam(policy.actor.params.size, lr=config.lr, dtype=np.float32)
    helpers = dict(oracle_policies(env_config))
    if others:
        helpers.update(others)
    data = DemoDataset.empty()
    start = time.perf_counter()
    next_eval = config.epoch_steps
    curve: list[CurvePoint] = []
    best, best_policy, converged = -1.0, policy.frozen_copy(), False
    while data.env_steps < config.max_env_steps:
        new = collect_demos(spec, config.demos_per_round, env_config, demo_rng)
        data = data.extend(new)
        policy.normalizer.update(new.observations, new.goals)
        fit_bc(policy, data, config.epochs_per_round, config.batch_size, opt, fit_rng)
        if data.env_steps < next_eval:
            continue
        while next_eval <= data.env_steps:
            next_eval += config.epoch_steps
        seeds = episode_seeds(eval_rng, config.eval_episodes)
        success = evaluate_policies({**helpers, spec.name: policy}, env_config, seeds)
        point = CurvePoint(data.env_steps, success, time.perf_counter() - start)
        curve.append(point)
        improved = success >= best
        if improved:
            best, best_policy = success, policy.frozen_copy()
        if on_eval is not None:
            on_eval(point, improved, policy)
        if success >= config.target_success:
            converged = True
            break
    return TrainResult(best_policy, curve, converged, data.env_steps, policy)
