"""Command-line entry point: ``python -m pickplace_hrl <verb> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .env import GEOMETRIES
from .errors import ConfigurationError, ContractViolation, NumericError
from .metrics import compare_report
from .subtasks import SUBTASK_ORDER


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML experiment config (defaults used for omitted keys)")
    p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    p.add_argument("--out", help="output directory (overrides config out_dir)")
    p.add_argument("--steps", type=int, help="env-step budget for the trainer(s) this command runs")
    p.add_argument("--deterministic", action="store_true",
                   help="single rollout worker and blank wall-clock column, so reruns are byte-identical")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pickplace-hrl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train-lse", help="train one subtask expert with DDPG+HER")
    p.add_argument("--subtask", required=True, choices=SUBTASK_ORDER)
    _common(p)
    p = sub.add_parser("train-hlc", help="train the choreographer over saved experts")
    p.add_argument("--lse-method", default="ddpg_her", choices=["ddpg_her", "bc"])
    _common(p)
    _common(sub.add_parser("train-e2e", help="train the end-to-end DDPG+HER baseline"))
    p = sub.add_parser("train-bc", help="train one subtask expert by behavior cloning")
    p.add_argument("--subtask", required=True, choices=SUBTASK_ORDER)
    _common(p)
    p = sub.add_parser("curriculum", help="train the three experts in order, then the choreographer")
    p.add_argument("--method", default="ddpg_her", choices=["ddpg_her", "bc"])
    _common(p)
    p = sub.add_parser("fine-tune", help="fine-tune the retract expert on another geometry")
    p.add_argument("--geometry", required=True, choices=sorted(GEOMETRIES))
    _common(p)
    p = sub.add_parser("evaluate", help="composite success of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--geometry", choices=sorted(GEOMETRIES))
    p.add_argument("--episodes", type=int)
    _common(p)
    p = sub.add_parser("activations", help="dump per-step actions of oracle, experts and end-to-end policy")
    p.add_argument("--dump", help="CSV path (default <out>/seed_<n>/activations.csv)")
    _common(p)
    p = sub.add_parser("report", help="print the step-count comparison table")
    p.add_argument("--metrics", nargs="*", help="metrics CSV files (default <out>/metrics.csv)")
    p.add_argument("--threshold", type=float)
    _common(p)
    return parser


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.deterministic:
        cfg = replace(cfg, deterministic=True)
    if args.steps is not None:
        if args.steps <= 0:
            raise ConfigurationError("--steps must be positive")
        budget = {
            "train-lse": ("lse",), "train-e2e": ("e2e",), "train-bc": ("bc",),
            "train-hlc": ("hlc",), "curriculum": ("lse", "bc", "hlc"),
        }.get(args.verb, ())
        for section in budget:
            cfg = replace(cfg, **{section: replace(getattr(cfg, section), max_env_steps=args.steps)})
        if args.verb == "fine-tune":
            cfg = replace(cfg, fine_tune_budget=args.steps)
    return cfg


def _seeds(args, cfg) -> list[int]:
    return [args.seed] if args.seed is not None else list(cfg.seeds)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, default=str))


def _stage(s: harness.StageResult) -> dict:
    return {"stage": s.name, "converged": s.converged, "env_steps": s.env_steps,
            "best_success": s.best_success, "checkpoint": str(s.checkpoint)}


def run(args) -> int:
    cfg = _config(args)
    paths = harness.RunPaths(Path(cfg.out_dir))
    seeds = _seeds(args, cfg)
    verb = args.verb
    if verb == "train-lse":
        _print([_stage(harness.train_lse_stage(cfg, args.subtask, s, paths)) for s in seeds])
    elif verb == "train-bc":
        _print([_stage(harness.train_bc_stage(cfg, args.subtask, s, paths)) for s in seeds])
    elif verb == "train-e2e":
        _print([_stage(harness.train_e2e_stage(cfg, s, paths)) for s in seeds])
    elif verb == "train-hlc":
        _print([_stage(harness.train_hlc_stage(cfg, s, paths, args.lse_method)) for s in seeds])
    elif verb == "curriculum":
        out = []
        for r in harness.run_curriculum(cfg, seeds, args.method):
            out.append({"seed": r.seed, "final_success": r.final_success, "sequence_accuracy": r.sequence_accuracy,
                        "degraded": r.degraded, "stages": [_stage(s) for s in r.stages]})
        _print(out)
    elif verb == "fine-tune":
        out = []
        for s in seeds:
            r = harness.fine_tune_retract(cfg, s, args.geometry, paths=paths)
            out.append({"seed": s, "geometry": r.geometry, "success_rate": r.success, **_stage(r.stage)})
        _print(out)
    elif verb == "evaluate":
        _print(harness.evaluate_checkpoint(cfg, args.checkpoint, seeds[0], args.geometry, args.episodes))
    elif verb == "activations":
        out = []
        for s in seeds:
            dump = args.dump if (args.dump and len(seeds) == 1) else paths.out / f"seed_{s}" / "activations.csv"
            rows = harness.dump_activations_for_run(cfg, s, dump, paths)
            out.append({"seed": s, "path": str(dump), "rows": len(rows),
                        "distance_to_oracle": harness.activation_distances(rows)})
        _print(out)
    elif verb == "report":
        files = args.metrics or [paths.metrics]
        print(compare_report(files, args.threshold if args.threshold is not None else cfg.threshold))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return run(args)
    except (ConfigurationError, ContractViolation, NumericError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
