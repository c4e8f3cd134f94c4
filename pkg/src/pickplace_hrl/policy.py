"""Goal-conditioned actor wrapper shared by the DDPG+HER and behavior-cloning learners."""
from __future__ import annotations

import numpy as np

from .env import ACTION_DIM, GOAL_DIM, OBS_DIM, EnvState, GoalObservation
from .nn import Mlp, MlpSpec, RunningNormalizer

OBS_CLIP = 200.0


def actor_spec(hidden_dims=(256, 256, 256)) -> MlpSpec:
    return MlpSpec(OBS_DIM + GOAL_DIM, ACTION_DIM, tuple(hidden_dims), "tanh")


class InputNormalizer:
    """Separate running normalizers for the observation and the goal."""

    def __init__(self):
        self.obs = RunningNormalizer(OBS_DIM)
        self.goal = RunningNormalizer(GOAL_DIM)

    def update(self, obs: np.ndarray, goals: np.ndarray) -> None:
        self.obs.update(np.clip(obs, -OBS_CLIP, OBS_CLIP))
        self.goal.update(np.clip(goals, -OBS_CLIP, OBS_CLIP))

    def __call__(self, obs: np.ndarray, goals: np.ndarray) -> np.ndarray:
        o = self.obs(np.clip(obs, -OBS_CLIP, OBS_CLIP))
        g = self.goal(np.clip(goals, -OBS_CLIP, OBS_CLIP))
        return np.concatenate([o, g], axis=-1)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {**self.obs.state_arrays("norm.obs"), **self.goal.state_arrays("norm.goal")}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.obs.load_state_arrays(arrays, "norm.obs")
        self.goal.load_state_arrays(arrays, "norm.goal")

    def copy(self) -> "InputNormalizer":
        new = InputNormalizer()
        new.load_state_arrays({k: np.copy(v) for k, v in self.state_arrays().items()})
        return new


class ActorPolicy:
    """Deterministic policy: normalized (observation, goal) -> tanh-bounded action."""

    def __init__(self, actor: Mlp, normalizer: InputNormalizer):
        self.actor = actor
        self.normalizer = normalizer

    def act(self, observation: np.ndarray, goal: np.ndarray) -> np.ndarray:
        return self.actor.forward(self.normalizer(observation, goal), cache=False)

    def __call__(self, state: EnvState, obs: GoalObservation) -> np.ndarray:
        return self.act(obs.observation, obs.desired_goal)

    def frozen_copy(self) -> "ActorPolicy":
        return ActorPolicy(self.actor.copy(), self.normalizer.copy())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"actor": self.actor.params, **self.normalizer.state_arrays()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], hidden_dims=(256, 256, 256)) -> "ActorPolicy":
        norm = InputNormalizer()
        norm.load_state_arrays(arrays)
        return cls(Mlp(actor_spec(hidden_dims), params=arrays["actor"]), norm)
