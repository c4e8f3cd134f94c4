"""
The full pipeline on one seed: experts, choreographer, baselines, report
========================================================================

Uses the same entry points as the command line. Expect roughly 20 minutes on
one core, most of it spent on the end-to-end baseline.
"""
from pathlib import Path

from pickplace_hrl import harness
from pickplace_hrl.metrics import compare_report

cfg = harness.config_from_dict({"seeds": [0], "out_dir": "runs/demo", "lse": {"epoch_steps": 3000},
                                "bc": {"epoch_steps": 3000}})
paths = harness.RunPaths(Path(cfg.out_dir))

for r in harness.run_curriculum(cfg):
    print("curriculum seed", r.seed, "success", r.final_success, "sequence", r.sequence_accuracy,
          "degraded" if r.degraded else "")
for sub in ("approach", "manipulate", "retract"):
    harness.train_bc_stage(cfg, sub, 0, paths)
harness.train_e2e_stage(cfg, 0, paths)

ft = harness.fine_tune_retract(cfg, 0, "thin_cylinder")
print("fine-tuned retract on thin_cylinder:", ft.success)

rows = harness.dump_activations_for_run(cfg, 0, paths.out / "seed_0" / "activations.csv")
print("distance to oracle:", harness.activation_distances(rows))
print(compare_report([paths.metrics], cfg.threshold))
