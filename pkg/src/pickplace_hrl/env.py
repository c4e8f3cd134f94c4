"""Deterministic kinematic pick-and-place environment.

Quasi-static model: the gripper moves by bounded position deltas, the aperture
integrates a grip command, and an object is either resting on the table or
rigidly attached to the gripper. The step function takes the goal explicitly so
every subtask can be scored against its own subgoal with a dense distance
reward.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ContractViolation

MAX_APERTURE = 0.05
OBS_DIM = 17
GOAL_DIM = 3
ACTION_DIM = 4
HOME = (0.5, 0.5, 0.3)
ACHIEVED_SOURCES = ("gripper", "object")


@dataclass(frozen=True)
class ObjectGeometry:
    shape: str
    grasp_width: float

    def __post_init__(self):
        if not 0.0 < self.grasp_width < MAX_APERTURE:
            raise ContractViolation(f"grasp width must lie in (0, {MAX_APERTURE})")


GEOMETRIES = {
    "block": ObjectGeometry("block", 0.02),
    "thin_cylinder": ObjectGeometry("thin_cylinder", 0.01),
    "small_box": ObjectGeometry("small_box", 0.015),
}


@dataclass(frozen=True)
class EnvConfig:
    workspace_low: tuple[float, float, float] = (0.0, 0.0, 0.0)
    workspace_high: tuple[float, float, float] = (1.0, 1.0, 0.5)
    action_scale: float = 0.05
    aperture_scale: float = 0.02
    grasp_radius: float = 0.03
    grip_tol: float = 0.005
    crush_tol: float = 0.005
    success_threshold: float = 0.05
    episode_length: int = 50
    geometry: ObjectGeometry = field(default_factory=lambda: GEOMETRIES["block"])
    object_range: tuple[float, float] = (0.2, 0.8)
    goal_z_range: tuple[float, float] = (0.05, 0.3)
    seed: int | None = None

    def __post_init__(self):
        scales = (self.action_scale, self.aperture_scale, self.grasp_radius, self.grip_tol,
                  self.crush_tol, self.success_threshold)
        if min(scales) <= 0 or self.episode_length < 1:
            raise ContractViolation("environment scales and episode length must be positive")

    def with_geometry(self, name: str) -> "EnvConfig":
        return replace(self, geometry=GEOMETRIES[name])

    def to_dict(self) -> dict:
        return {
            "workspace_low": list(self.workspace_low), "workspace_high": list(self.workspace_high),
            "action_scale": self.action_scale, "aperture_scale": self.aperture_scale,
            "grasp_radius": self.grasp_radius, "grip_tol": self.grip_tol, "crush_tol": self.crush_tol,
            "success_threshold": self.success_threshold, "episode_length": self.episode_length,
            "geometry": self.geometry.shape, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        if "geometry" in d and isinstance(d["geometry"], str):
            d["geometry"] = GEOMETRIES[d["geometry"]]
        for key in ("workspace_low", "workspace_high", "object_range", "goal_z_range"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


@dataclass
class EnvState:
    gripper: np.ndarray
    aperture: float
    obj: np.ndarray
    attached: bool
    goal: np.ndarray
    obj_initial: np.ndarray
    step_count: int = 0
    grasp_failed: bool = False
    prev_gripper: np.ndarray | None = None
    prev_obj: np.ndarray | None = None

    def copy(self) -> "EnvState":
        return EnvState(
            self.gripper.copy(), self.aperture, self.obj.copy(), self.attached, self.goal.copy(),
            self.obj_initial.copy(), self.step_count, self.grasp_failed,
            None if self.prev_gripper is None else self.prev_gripper.copy(),
            None if self.prev_obj is None else self.prev_obj.copy(),
        )


@dataclass
class GoalObservation:
    observation: np.ndarray
    achieved_goal: np.ndarray
    desired_goal: np.ndarray
    is_success: bool


def compute_reward(achieved: np.ndarray, goal: np.ndarray) -> np.ndarray | float:
    """Dense reward: negative Euclidean distance between achieved and desired goal."""
    d = np.linalg.norm(np.asarray(achieved, dtype=np.float64) - np.asarray(goal, dtype=np.float64), axis=-1)
    return -d if np.ndim(d) else -float(d)


def is_success(achieved: np.ndarray, goal: np.ndarray, threshold: float = 0.05) -> bool | np.ndarray:
    d = np.linalg.norm(np.asarray(achieved, dtype=np.float64) - np.asarray(goal, dtype=np.float64), axis=-1)
    return d < threshold if np.ndim(d) else bool(d < threshold)


def achieved_goal(state: EnvState, source: str) -> np.ndarray:
    if source == "gripper":
        return state.gripper.copy()
    if source == "object":
        return state.obj.copy()
    raise ContractViolation(f"unknown achieved-goal source {source!r}")


def attach_rule(config: EnvConfig, state: EnvState, prev_aperture: float | None = None) -> None:
    """Apply the grasp model to ``state`` in place (once per step, after integration).

    Fingers close continuously within a step: if a closing motion sweeps through
    the grip window [width, width + grip_tol] near the object, the fingers stop
    on contact and the object attaches. Arriving with fingers already closed
    below width - crush_tol knocks the object and the grasp fails for the episode.
    """
    width = config.geometry.grasp_width
    window_hi = width + config.grip_tol
    if state.attached:
        # fingers cannot close through a held object
        state.aperture = max(state.aperture, width)
        if state.aperture > window_hi:
            state.attached = False
            state.obj = np.array([state.gripper[0], state.gripper[1], 0.0])
        else:
            state.obj = state.gripper.copy()
        return
    if state.grasp_failed:
        return
    if np.linalg.norm(state.gripper - state.obj) > config.grasp_radius:
        return
    prev = state.aperture if prev_aperture is None else prev_aperture
    in_window = width <= state.aperture <= window_hi
    swept = prev >= width and state.aperture < width
    if in_window or swept:
        state.aperture = max(state.aperture, width)
        state.attached = True
        state.obj = state.gripper.copy()
    elif state.aperture < width - config.crush_tol:
        state.grasp_failed = True


def observe(config: EnvConfig, state: EnvState, goal: np.ndarray, source: str) -> GoalObservation:
    prev_g = state.gripper if state.prev_gripper is None else state.prev_gripper
    prev_o = state.obj if state.prev_obj is None else state.prev_obj
    obs = np.concatenate([
        state.gripper, [state.aperture], state.obj, state.obj - state.gripper,
        state.gripper - prev_g, state.obj - prev_o, [float(state.attached)],
    ])
    ag = achieved_goal(state, source)
    goal = np.asarray(goal, dtype=np.float64)
    return GoalObservation(obs, ag, goal.copy(), is_success(ag, goal, config.success_threshold))


def reset(config: EnvConfig, rng: np.random.Generator) -> EnvState:
    lo, hi = config.object_range
    obj = np.array([rng.uniform(lo, hi), rng.uniform(lo, hi), 0.0])
    zlo, zhi = config.goal_z_range
    goal = np.array([rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(zlo, zhi)])
    return EnvState(
        gripper=np.array(HOME, dtype=np.float64), aperture=MAX_APERTURE, obj=obj, attached=False,
        goal=goal, obj_initial=obj.copy(),
    )


def step(config: EnvConfig, state: EnvState, action: np.ndarray) -> EnvState:
    """Integrate one action and return the successor state (input is not modified)."""
    if state.step_count >= config.episode_length:
        raise ContractViolation("step() called on a finished episode")
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    if a.shape != (ACTION_DIM,):
        raise ContractViolation(f"action must have {ACTION_DIM} components")
    nxt = state.copy()
    nxt.prev_gripper = state.gripper.copy()
    nxt.prev_obj = state.obj.copy()
    nxt.gripper = np.clip(state.gripper + config.action_scale * a[:3],
                          config.workspace_low, config.workspace_high)
    nxt.aperture = float(np.clip(state.aperture + config.aperture_scale * a[3], 0.0, MAX_APERTURE))
    attach_rule(config, nxt, prev_aperture=state.aperture)
    nxt.step_count += 1
    return nxt


class PickPlaceEnv:
    """Stateful wrapper with the two-argument ``step(action, goal)`` interface.

    ``achieved`` selects which point is scored as the achieved goal
    ("gripper" or "object"); subtasks switch it as control passes between them.
    """

    def __init__(self, config: EnvConfig | None = None, seed: int | None = None):
        self.config = config or EnvConfig()
        seed = self.config.seed if seed is None else seed
        self.rng = np.random.default_rng(seed)
        self.state: EnvState | None = None
        self.achieved = "object"

    def reset(self, seed: int | None = None) -> GoalObservation:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = reset(self.config, self.rng)
        return self.observe(self.state.goal)

    def observe(self, goal: np.ndarray) -> GoalObservation:
        return observe(self.config, self.state, goal, self.achieved)

    def step(self, action: np.ndarray, goal: np.ndarray) -> tuple[GoalObservation, float, bool]:
        if self.state is None:
            raise ContractViolation("reset() must be called before step()")
        self.state = step(self.config, self.state, action)
        obs = self.observe(goal)
        reward = compute_reward(obs.achieved_goal, goal)
        done = self.state.step_count >= self.config.episode_length
        return obs, reward, done

    @property
    def done(self) -> bool:
        return self.state is not None and self.state.step_count >= self.config.episode_length

    def task_success(self) -> bool:
        return bool(is_success(self.state.obj, self.state.goal, self.config.success_threshold))


TRAJECTORY_HEADER = ["step", "pg_x", "pg_y", "pg_z", "w", "po_x", "po_y", "po_z", "attached",
                     "ag_x", "ag_y", "ag_z", "reward"]


def write_trajectory_csv(path: str | Path, rows: Iterable[tuple[EnvState, np.ndarray, float]]) -> Path:
    """Dump ``(state, achieved goal, reward)`` triples as a trajectory CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_HEADER)
        for st, ag, r in rows:
            w.writerow([st.step_count, *map(repr, map(float, st.gripper)), repr(st.aperture),
                        *map(repr, map(float, st.obj)), int(st.attached),
                        *map(repr, map(float, ag)), repr(float(r))])
    return path
