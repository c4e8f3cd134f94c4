"""The approach / manipulate / retract decomposition.

Each subtask has a step budget, a subgoal, an achieved-goal source and a
hand-engineered controller. Learned experts are evaluated by running a full
pick-and-place episode where only the tested subtask uses the learned policy.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import env as kenv
from .env import EnvConfig, EnvState, GoalObservation
from .errors import ContractViolation

Policy = Callable[[EnvState, GoalObservation], np.ndarray]

LIFT_HEIGHT = 0.05
MAX_SEQUENCE = 6


@dataclass(frozen=True)
class SubtaskSpec:
    name: str
    index: int
    budget: int
    achieved: str
    gripper_mode: str


APPROACH = SubtaskSpec("approach", 0, 15, "gripper", "open")
MANIPULATE = SubtaskSpec("manipulate", 1, 10, "object", "closing")
RETRACT = SubtaskSpec("retract", 2, 25, "object", "holding")
SUBTASKS: dict[str, SubtaskSpec] = {s.name: s for s in (APPROACH, MANIPULATE, RETRACT)}
# whole task as one window, for the end-to-end baseline
END_TO_END = SubtaskSpec("e2e", -1, 50, "object", "any")
SUBTASK_ORDER = ("approach", "manipulate", "retract")
CANONICAL_SEQUENCE = SUBTASK_ORDER


def get_subtask(subtask: str | SubtaskSpec) -> SubtaskSpec:
    if isinstance(subtask, SubtaskSpec):
        return subtask
    if subtask == END_TO_END.name:
        return END_TO_END
    try:
        return SUBTASKS[subtask]
    except KeyError:
        raise ContractViolation(f"unknown subtask {subtask!r}") from None


def subgoal_for(subtask: str | SubtaskSpec, state: EnvState) -> np.ndarray:
    name = get_subtask(subtask).name
    if name == "approach":
        return state.obj.copy()
    if name == "manipulate":
        return state.obj_initial + np.array([0.0, 0.0, LIFT_HEIGHT])
    return state.goal.copy()


def achieved_goal_for(subtask: str | SubtaskSpec, state: EnvState) -> np.ndarray:
    return kenv.achieved_goal(state, get_subtask(subtask).achieved)


def constrain_action(subtask: str | SubtaskSpec, action: np.ndarray) -> np.ndarray:
    """Clip to the action box and apply the subtask's gripper mode (approach keeps it open)."""
    a = np.clip(action, -1.0, 1.0)
    if get_subtask(subtask).gripper_mode == "open":
        a[3] = 1.0
    return a


def _toward(target: np.ndarray, state: EnvState, config: EnvConfig) -> np.ndarray:
    return np.clip((target - state.gripper) / config.action_scale, -1.0, 1.0)


def oracle_action(subtask: str | SubtaskSpec, state: EnvState, config: EnvConfig) -> np.ndarray:
    """Hand-engineered controller for one subtask."""
    name = get_subtask(subtask).name
    if name == "approach":
        return np.append(_toward(state.obj, state, config), 1.0)
    if name == "manipulate":
        if not state.attached:
            # close onto the middle of the grip window; a full-rate close would skip past it
            target = config.geometry.grasp_width + 0.5 * config.grip_tol
            grip = np.clip((target - state.aperture) / config.aperture_scale, -1.0, 1.0)
            return np.array([0.0, 0.0, 0.0, grip])
        return np.append(_toward(subgoal_for(name, state), state, config), -1.0)
    return np.append(_toward(state.goal, state, config), -1.0)


class OraclePolicy:
    def __init__(self, subtask: str | SubtaskSpec, config: EnvConfig):
        self.subtask = get_subtask(subtask)
        self.config = config

    def __call__(self, state: EnvState, obs: GoalObservation) -> np.ndarray:
        return oracle_action(self.subtask, state, self.config)


def oracle_policies(config: EnvConfig) -> dict[str, Policy]:
    return {name: OraclePolicy(name, config) for name in SUBTASK_ORDER}


@dataclass
class StepRecord:
    subtask: str
    state: EnvState
    action: np.ndarray
    reward: float
    achieved_goal: np.ndarray
    subgoal: np.ndarray


@dataclass
class CompositeEpisodeResult:
    success: bool
    env_steps: int
    sequence: list[str]
    final_state: EnvState
    traces: dict[str, list[StepRecord]] = field(default_factory=dict)


def run_subtask(
    policy: Policy,
    subtask: str | SubtaskSpec,
    config: EnvConfig,
    state: EnvState,
    budget: int | None = None,
    record: bool = False,
) -> tuple[EnvState, list[StepRecord]]:
    """Run one subtask from ``state`` for its budget; the subgoal is fixed at entry."""
    spec = get_subtask(subtask)
    goal = subgoal_for(spec, state)
    trace = []
    n = spec.budget if budget is None else budget
    for _ in range(n):
        obs = kenv.observe(config, state, goal, spec.achieved)
        action = constrain_action(spec, policy(state, obs))
        state = kenv.step(config, state, action)
        if record:
            ag = kenv.achieved_goal(state, spec.achieved)
            trace.append(StepRecord(spec.name, state, action, kenv.compute_reward(ag, goal), ag, goal))
    return state, trace


def run_composite_episode(
    policies: Mapping[str, Policy],
    sequence: Sequence[str],
    config: EnvConfig,
    seed: int,
    record: bool = False,
) -> CompositeEpisodeResult:
    """Execute subtasks in ``sequence`` order, each for its full step budget."""
    if len(sequence) > MAX_SEQUENCE:
        raise ContractViolation(f"sequence longer than {MAX_SEQUENCE} subtasks")
    specs = [get_subtask(s) for s in sequence]
    missing = [s.name for s in specs if s.name not in policies]
    if missing:
        raise ContractViolation(f"no policy for subtasks {missing}")
    total = sum(s.budget for s in specs)
    cfg = replace(config, episode_length=max(config.episode_length, total))
    state = kenv.reset(cfg, np.random.default_rng(seed))
    traces: dict[str, list[StepRecord]] = {}
    for spec in specs:
        state, trace = run_subtask(policies[spec.name], spec, cfg, state, record=record)
        if record:
            traces.setdefault(spec.name, []).extend(trace)
    success = bool(kenv.is_success(state.obj, state.goal, cfg.success_threshold))
    return CompositeEpisodeResult(success, state.step_count, [s.name for s in specs], state, traces)


def episode_seeds(rng: np.random.Generator | int, n: int) -> list[int]:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=n)]


def evaluate_policies(
    policies: Mapping[str, Policy],
    config: EnvConfig,
    seeds: Sequence[int],
    sequence: Sequence[str] = CANONICAL_SEQUENCE,
) -> float:
    wins = sum(run_composite_episode(policies, sequence, config, s).success for s in seeds)
    return wins / len(seeds)


def evaluate_lse(
    policy: Policy,
    subtask: str | SubtaskSpec,
    config: EnvConfig,
    episodes: int = 100,
    rng: np.random.Generator | int = 0,
    others: Mapping[str, Policy] | None = None,
) -> float:
    """Composite success rate with ``policy`` on ``subtask`` and oracles (or ``others``) elsewhere."""
    policies = dict(oracle_policies(config))
    if others:
        policies.update(others)
    policies[get_subtask(subtask).name] = policy
    return evaluate_policies(policies, config, episode_seeds(rng, episodes))
