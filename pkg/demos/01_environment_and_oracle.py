"""
The kinematic pick-and-place world and its scripted expert
==========================================================

Step the environment by hand, watch the grasp rule decide between a clean
grasp and a crushed one, then score the hand-written subtask sequence.
"""
import time

import numpy as np

from pickplace_hrl import env as kenv
from pickplace_hrl.env import EnvConfig
from pickplace_hrl.subtasks import CANONICAL_SEQUENCE, episode_seeds, evaluate_policies, oracle_policies

cfg = EnvConfig()
state = kenv.reset(cfg, np.random.default_rng(0))
print("gripper", state.gripper, "object", state.obj, "goal", state.goal)

# drive straight down onto the object, then close
state.gripper[:] = state.obj + [0, 0, 0.1]
for _ in range(2):
    state = kenv.step(cfg, state, np.array([0, 0, -1.0, 1.0]))
while not state.attached and not state.grasp_failed:
    state = kenv.step(cfg, state, np.array([0, 0, 0, -1.0]))
print("attached:", state.attached, "aperture:", round(state.aperture, 4))

# the same closure is fine for every geometry because closing sweeps through each grasp window
for shape in ("block", "thin_cylinder", "small_box"):
    c = cfg.with_geometry(shape)
    t = time.perf_counter()
    rate = evaluate_policies(oracle_policies(c), c, episode_seeds(0, 1000))
    print(f"{shape:14s} oracle {'/'.join(CANONICAL_SEQUENCE)}: {rate:.3f} in {time.perf_counter() - t:.1f}s")

# a wrong ordering never succeeds
print("retract x3:", evaluate_policies(oracle_policies(cfg), cfg, episode_seeds(1, 200), ["retract"] * 3))
