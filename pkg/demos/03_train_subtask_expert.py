"""
Training one subtask expert with DDPG and hindsight relabeling
==============================================================

Manipulate starts where the scripted approach leaves off, so each training
episode costs 15 lead-in steps plus the 10 steps the learner controls.
"""
import numpy as np

from pickplace_hrl.ddpg import LseTrainConfig, train_lse
from pickplace_hrl.env import EnvConfig
from pickplace_hrl.subtasks import evaluate_lse

cfg = EnvConfig()
res = train_lse(cfg, "manipulate", LseTrainConfig(epoch_steps=3000, max_env_steps=150_000), seed=0,
                on_eval=lambda p, improved, agent: print(f"{p.env_steps:6d} steps  success {p.success_rate:.2f}"))
print("converged:", res.converged, "after", res.env_steps, "env steps")
print("held-out success:", evaluate_lse(res.policy, "manipulate", cfg, 100, rng=np.random.default_rng(99)))
