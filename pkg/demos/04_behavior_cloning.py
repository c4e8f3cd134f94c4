"""
Behavior cloning from scripted demonstrations
=============================================

Every demonstration step, lead-in included, counts against the budget so the
curve sits on the same axis as the reinforcement learners.
"""
from pickplace_hrl.bc import BcTrainConfig, collect_demos, train_bc_lse
from pickplace_hrl.env import EnvConfig

cfg = EnvConfig()
demos = collect_demos("retract", 5, cfg, 0)
print(len(demos), "state-action pairs cost", demos.env_steps, "env steps")

res = train_bc_lse(cfg, "retract", BcTrainConfig(epoch_steps=5000, max_env_steps=20_000), seed=0)
for p in res.curve:
    print(f"{p.env_steps:6d} steps  success {p.success_rate:.2f}")
