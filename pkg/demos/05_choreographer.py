"""
A recurrent high-level controller choosing which expert runs next
==================================================================

Trained here over the scripted experts so it finishes in a couple of minutes;
the curriculum does the same over learned ones. Success can reach 1.0
before the ordering settles, since other orderings also finish the task.
"""
from pickplace_hrl.env import EnvConfig
from pickplace_hrl.hlc import HlcTrainConfig, evaluate_hlc, run_hlc_episode, train_hlc
from pickplace_hrl.subtasks import episode_seeds, oracle_policies

cfg = EnvConfig()
experts = oracle_policies(cfg)
res = train_hlc(cfg, experts, HlcTrainConfig(max_env_steps=300_000), seed=0,
                on_eval=lambda p, improved, pol: print(
                    f"{p.env_steps:7d} steps  success {p.success_rate:.2f}  sequence {p.sequence_accuracy:.2f}"))
success, seq = evaluate_hlc(res.policy, experts, cfg, episode_seeds(123, 100))
print("greedy success", success, "canonical sequence", seq)
print("one greedy episode:", run_hlc_episode(res.policy, experts, cfg, 7, greedy=True).sequence)
