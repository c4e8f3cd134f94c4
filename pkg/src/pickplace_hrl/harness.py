"""Experiment orchestration: configuration, curricula, baselines, fine-tuning and dumps.

Everything runs sequentially in one process. Each training command appends
to ``<out>/metrics.csv``, writes checkpoints under ``<out>/seed_<n>/`` and
logs stage boundaries to ``<out>/stages.log``.
"""
from __future__ import annotations

import csv
import dataclasses
import datetime as _dt
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from . import env as kenv
from .bc import BcTrainConfig, train_bc_lse
from .ddpg import DdpgAgent, DdpgConfig, LseTrainConfig, TrainResult, train_lse
from .env import GEOMETRIES, EnvConfig
from .errors import ConfigurationError
from .hlc import GaeConfig, HlcTrainConfig, evaluate_hlc, train_hlc
from .metrics import MetricsRow, append_metrics
from .nn import GruPolicy, load_checkpoint, save_checkpoint
from .policy import ActorPolicy
from .subtasks import (
    CANONICAL_SEQUENCE,
    END_TO_END,
    SUBTASK_ORDER,
    SUBTASKS,
    Policy,
    episode_seeds,
    evaluate_policies,
    oracle_policies,
    run_composite_episode,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- configuration

def _default_e2e() -> LseTrainConfig:
    return LseTrainConfig(max_env_steps=500_000)


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    lse: LseTrainConfig = field(default_factory=LseTrainConfig)
    e2e: LseTrainConfig = field(default_factory=_default_e2e)
    bc: BcTrainConfig = field(default_factory=BcTrainConfig)
    hlc: HlcTrainConfig = field(default_factory=HlcTrainConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    out_dir: str = "runs"
    threshold: float = 0.9
    fine_tune_budget: int = 150_000
    eval_episodes: int = 100
    activation_episodes: int = 10
    deterministic: bool = False
    methods: dict[str, bool] = field(default_factory=lambda: {"curriculum": True, "bc": True, "e2e": True})

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigurationError("success threshold must lie in (0, 1]")

    def for_run(self) -> "ExperimentConfig":
        """Copy with deterministic-mode adjustments applied (single rollout worker)."""
        if not self.deterministic:
            return self
        hlc = replace(self.hlc, gae=replace(self.hlc.gae, workers=1))
        return replace(self, hlc=hlc)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["env"] = self.env.to_dict()
        return json.loads(json.dumps(d))


_SECTIONS = {"lse": LseTrainConfig, "e2e": LseTrainConfig, "bc": BcTrainConfig, "hlc": HlcTrainConfig}


def _merge(cls, base, overrides: Mapping[str, Any], where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls) if f.init}
    for key, value in overrides.items():
        current = kwargs[key]
        if dataclasses.is_dataclass(current) and isinstance(value, Mapping):
            value = _merge(type(current), current, value, f"{where}.{key}")
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: Mapping[str, Any] | None) -> ExperimentConfig:
    """Build a config from nested overrides; anything omitted keeps its default."""
    data = dict(data or {})
    base = ExperimentConfig()
    kwargs: dict[str, Any] = {}
    if "env" in data:
        env = dict(base.env.to_dict())
        env.update(data.pop("env") or {})
        try:
            kwargs["env"] = EnvConfig.from_dict(env)
        except (TypeError, KeyError) as exc:
            raise ConfigurationError(f"bad env section: {exc}") from exc
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _merge(cls, getattr(base, name), data.pop(name) or {}, name)
    if "methods" in data:
        kwargs["methods"] = {**base.methods, **(data.pop("methods") or {})}
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    kwargs.update(data)
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is not None and not isinstance(data, Mapping):
        raise ConfigurationError("config file must hold a mapping")
    return config_from_dict(data)


# ---------------------------------------------------------------- layout and checkpoints

@dataclass(frozen=True)
class RunPaths:
    out: Path

    @property
    def metrics(self) -> Path:
        return self.out / "metrics.csv"

    @property
    def stage_log(self) -> Path:
        return self.out / "stages.log"

    def checkpoint(self, seed: int, name: str) -> Path:
        return self.out / f"seed_{seed}" / f"{name}.npz"


def log_stage(paths: RunPaths, seed: int, stage: str, event: str, detail: str = "") -> None:
    paths.out.mkdir(parents=True, exist_ok=True)
    stamp = _dt.datetime.now().isoformat(timespec="seconds")
    with open(paths.stage_log, "a") as fh:
        fh.write(f"{stamp}\tseed={seed}\t{stage}\t{event}\t{detail}\n".rstrip("\t\n") + "\n")
    log.info("seed %d %s %s %s", seed, stage, event, detail)


def save_lse(path: Path, arrays: dict[str, np.ndarray], kind: str, subtask: str, hidden: Sequence[int],
             env_config: EnvConfig, seed: int, step: int) -> Path:
    descriptor = {"kind": kind, "subtask": subtask, "hidden_dims": list(hidden), "env": env_config.to_dict()}
    return save_checkpoint(path, descriptor, arrays, seed, step)


def _require(path: Path) -> Path:
    if not Path(path).exists():
        raise ConfigurationError(f"required checkpoint missing: {path}")
    return Path(path)


def load_actor_policy(path: str | Path) -> ActorPolicy:
    meta, arrays = load_checkpoint(_require(Path(path)))
    hidden = tuple(meta["descriptor"].get("hidden_dims", (256, 256, 256)))
    policy = ActorPolicy.from_arrays(arrays, hidden)
    return policy


def load_agent(path: str | Path, config: DdpgConfig) -> DdpgAgent:
    _, arrays = load_checkpoint(_require(Path(path)))
    agent = DdpgAgent(config, 0)
    agent.load_state_arrays(arrays)
    return agent


def save_hlc(path: Path, policy: GruPolicy, seed: int, step: int, lse_method: str) -> Path:
    descriptor = {"kind": "hlc", "hidden_dim": policy.hidden_dim, "input_dim": policy.input_dim,
                  "lse_method": lse_method}
    return save_checkpoint(path, descriptor, {"params": policy.params}, seed, step)


def load_hlc(path: str | Path) -> GruPolicy:
    meta, arrays = load_checkpoint(_require(Path(path)))
    d = meta["descriptor"]
    return GruPolicy(d["input_dim"], d["hidden_dim"], params=arrays["params"])


def lse_names(method: str) -> dict[str, str]:
    """Checkpoint stem for each subtask expert trained by ``method``."""
    prefix = "" if method == "ddpg_her" else f"{method}_"
    return {name: f"{prefix}{name}" for name in SUBTASK_ORDER}


def load_lse_set(paths: RunPaths, seed: int, method: str = "ddpg_her",
                 overrides: Mapping[str, str] | None = None) -> dict[str, Policy]:
    """Load all three subtask experts, failing fast with a configuration error if one is missing."""
    names = {**lse_names(method), **(overrides or {})}
    missing = [str(paths.checkpoint(seed, n)) for n in names.values() if not paths.checkpoint(seed, n).exists()]
    if missing:
        raise ConfigurationError("missing subtask checkpoints: " + ", ".join(missing))
    return {sub: load_actor_policy(paths.checkpoint(seed, n)) for sub, n in names.items()}


# ---------------------------------------------------------------- training stages

@dataclass
class StageResult:
    name: str
    converged: bool
    env_steps: int
    best_success: float
    checkpoint: Path | None


class _Recorder:
    """on_eval callback: append a metrics row, checkpoint on improvement."""

    def __init__(self, paths: RunPaths, method: str, subtask: str, seed: int, deterministic: bool, save):
        self.paths, self.method, self.subtask, self.seed = paths, method, subtask, seed
        self.deterministic, self.save = deterministic, save
        self.best = -1.0
        self.saved = False

    def __call__(self, point, improved, learner) -> None:
        wall = None if self.deterministic else point.wall_seconds
        seq = getattr(point, "sequence_accuracy", None)
        append_metrics(self.paths.metrics, [MetricsRow(self.method, self.subtask, point.env_steps,
                                                       point.success_rate, wall, self.seed, seq)])
        if improved:
            self.best = point.success_rate
            self.save(learner, point.env_steps)
            self.saved = True


def _finish(recorder: _Recorder, result, learner, name: str, path: Path) -> StageResult:
    if not recorder.saved:
        recorder.save(learner, result.env_steps)
    return StageResult(name, result.converged, result.env_steps, recorder.best, path)


def train_lse_stage(cfg: ExperimentConfig, subtask: str, seed: int, paths: RunPaths,
                    env_config: EnvConfig | None = None, train: LseTrainConfig | None = None,
                    agent: DdpgAgent | None = None, others: Mapping[str, Policy] | None = None,
                    checkpoint_name: str | None = None, method: str = "ddpg_her") -> StageResult:
    env_config = env_config or cfg.env
    train = train or cfg.lse
    name = checkpoint_name or subtask
    path = paths.checkpoint(seed, name)

    def save(ag: DdpgAgent, step: int) -> None:
        save_lse(path, ag.state_arrays(), "lse", subtask, train.ddpg.hidden_dims, env_config, seed, step)

    rec = _Recorder(paths, method, subtask, seed, cfg.deterministic, save)
    log_stage(paths, seed, f"{method}:{name}", "start")
    res = train_lse(env_config, subtask, train, seed, agent=agent, others=others, on_eval=rec)
    out = _finish(rec, res, res.agent, name, path)
    log_stage(paths, seed, f"{method}:{name}", "end", f"converged={res.converged} steps={res.env_steps}")
    return out


def train_e2e_stage(cfg: ExperimentConfig, seed: int, paths: RunPaths) -> StageResult:
    path = paths.checkpoint(seed, "e2e")
    hidden = cfg.e2e.ddpg.hidden_dims

    def save(ag: DdpgAgent, step: int) -> None:
        save_lse(path, ag.state_arrays(), "e2e", END_TO_END.name, hidden, cfg.env, seed, step)

    rec = _Recorder(paths, "e2e", "e2e", seed, cfg.deterministic, save)
    log_stage(paths, seed, "e2e", "start")
    res = train_lse(cfg.env, END_TO_END, cfg.e2e, seed, on_eval=rec)
    out = _finish(rec, res, res.agent, "e2e", path)
    log_stage(paths, seed, "e2e", "end", f"converged={res.converged} steps={res.env_steps}")
    return out


def train_bc_stage(cfg: ExperimentConfig, subtask: str, seed: int, paths: RunPaths,
                   others: Mapping[str, Policy] | None = None) -> StageResult:
    name = f"bc_{subtask}"
    path = paths.checkpoint(seed, name)

    def save(policy: ActorPolicy, step: int) -> None:
        save_lse(path, policy.state_arrays(), "bc", subtask, cfg.bc.hidden_dims, cfg.env, seed, step)

    rec = _Recorder(paths, "bc", subtask, seed, cfg.deterministic, save)
    log_stage(paths, seed, f"bc:{subtask}", "start")
    res = train_bc_lse(cfg.env, subtask, cfg.bc, seed, others=others, on_eval=rec)
    out = _finish(rec, res, res.agent, name, path)
    log_stage(paths, seed, f"bc:{subtask}", "end", f"converged={res.converged} steps={res.env_steps}")
    return out


def train_hlc_stage(cfg: ExperimentConfig, seed: int, paths: RunPaths, lse_method: str = "ddpg_her") -> StageResult:
    """Train the choreographer over the saved experts (fails fast if any checkpoint is missing)."""
    lses = load_lse_set(paths, seed, lse_method)
    method = "hlc" if lse_method == "ddpg_her" else f"hlc_{lse_method}"
    path = paths.checkpoint(seed, method)
    run_cfg = cfg.for_run()

    def save(policy: GruPolicy, step: int) -> None:
        save_hlc(path, policy, seed, step, lse_method)

    rec = _Recorder(paths, method, "hlc", seed, cfg.deterministic, save)
    log_stage(paths, seed, method, "start")
    res = train_hlc(cfg.env, lses, run_cfg.hlc, seed, on_eval=rec)
    out = _finish(rec, res, res.policy, method, path)
    log_stage(paths, seed, method, "end", f"converged={res.converged} steps={res.env_steps}")
    return out


@dataclass
class CurriculumResult:
    seed: int
    stages: list[StageResult]
    final_success: float
    sequence_accuracy: float

    @property
    def degraded(self) -> bool:
        return not all(s.converged for s in self.stages)

    @property
    def total_env_steps(self) -> int:
        return sum(s.env_steps for s in self.stages)


def run_curriculum(cfg: ExperimentConfig, seeds: Sequence[int] | None = None, method: str = "ddpg_her"
                   ) -> list[CurriculumResult]:
    """Train approach, manipulate and retract in turn, then the choreographer over them.

    ``method`` is "ddpg_her" or "bc". A stage that misses its target keeps its
    best checkpoint and the run is flagged degraded.
    """
    paths = RunPaths(Path(cfg.out_dir))
    results = []
    for seed in seeds if seeds is not None else cfg.seeds:
        stages = []
        for subtask in SUBTASK_ORDER:
            if method == "bc":
                stages.append(train_bc_stage(cfg, subtask, seed, paths))
            else:
                stages.append(train_lse_stage(cfg, subtask, seed, paths))
        stages.append(train_hlc_stage(cfg, seed, paths, method))
        hlc_name = "hlc" if method == "ddpg_her" else f"hlc_{method}"
        success, seq = evaluate_hlc(load_hlc(paths.checkpoint(seed, hlc_name)), load_lse_set(paths, seed, method),
                                    cfg.env, episode_seeds(np.random.default_rng([seed, 7]), cfg.eval_episodes))
        result = CurriculumResult(seed, stages, success, seq)
        log_stage(paths, seed, f"curriculum:{method}", "done",
                  f"success={success:.3f} sequence_accuracy={seq:.3f} degraded={result.degraded}")
        summary = paths.out / f"seed_{seed}" / f"curriculum_{method}.json"
        summary.write_text(json.dumps({
            "seed": seed, "final_success": success, "sequence_accuracy": seq, "degraded": result.degraded,
            "stages": [{"name": s.name, "converged": s.converged, "env_steps": s.env_steps,
                        "best_success": s.best_success} for s in stages],
        }, indent=2) + "\n")
        results.append(result)
    return results


# ---------------------------------------------------------------- fine-tuning and evaluation

@dataclass
class FineTuneResult:
    geometry: str
    stage: StageResult
    success: float
    checkpoint: Path


def fine_tune_retract(cfg: ExperimentConfig, seed: int, geometry: str, budget: int | None = None,
                      paths: RunPaths | None = None) -> FineTuneResult:
    """Continue training only the retract expert on a new object geometry.

    The approach and manipulate checkpoints are loaded read-only and drive the
    lead-in; the result is written to a new ``retract_<geometry>`` checkpoint.
    """
    if geometry not in GEOMETRIES:
        raise ConfigurationError(f"unknown geometry {geometry!r}; choose from {sorted(GEOMETRIES)}")
    paths = paths or RunPaths(Path(cfg.out_dir))
    frozen = load_lse_set(paths, seed)
    agent = load_agent(paths.checkpoint(seed, "retract"), cfg.lse.ddpg)
    env_config = cfg.env.with_geometry(geometry)
    train = replace(cfg.lse, max_env_steps=budget or cfg.fine_tune_budget)
    others = {k: frozen[k] for k in ("approach", "manipulate")}
    name = f"retract_{geometry}"
    stage = train_lse_stage(cfg, "retract", seed, paths, env_config=env_config, train=train, agent=agent,
                            others=others, checkpoint_name=name, method=f"ft_{geometry}")
    policies = {**others, "retract": load_actor_policy(paths.checkpoint(seed, name))}
    success = evaluate_policies(policies, env_config,
                                episode_seeds(np.random.default_rng([seed, 11]), cfg.eval_episodes))
    return FineTuneResult(geometry, stage, success, paths.checkpoint(seed, name))


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint: str | Path, seed: int = 0,
                        geometry: str | None = None, episodes: int | None = None) -> dict[str, Any]:
    """Composite success of a saved expert, end-to-end policy or choreographer."""
    checkpoint = _require(Path(checkpoint))
    meta, _ = load_checkpoint(checkpoint)
    kind = meta["descriptor"]["kind"]
    env_config = cfg.env.with_geometry(geometry) if geometry else cfg.env
    seeds = episode_seeds(np.random.default_rng([seed, 13]), episodes or cfg.eval_episodes)
    out: dict[str, Any] = {"checkpoint": str(checkpoint), "kind": kind, "geometry": env_config.geometry.shape,
                           "episodes": len(seeds)}
    if kind == "hlc":
        paths = RunPaths(checkpoint.parent.parent)
        lse_method = meta["descriptor"].get("lse_method", "ddpg_her")
        lses = load_lse_set(paths, int(checkpoint.parent.name.removeprefix("seed_")), lse_method)
        out["success_rate"], out["sequence_accuracy"] = evaluate_hlc(load_hlc(checkpoint), lses, env_config, seeds)
    elif kind == "e2e":
        out["success_rate"] = evaluate_policies({"e2e": load_actor_policy(checkpoint)}, env_config, seeds,
                                                [END_TO_END.name])
    else:
        sub = meta["descriptor"]["subtask"]
        policies = {**oracle_policies(env_config), sub: load_actor_policy(checkpoint)}
        out["subtask"] = sub
        out["success_rate"] = evaluate_policies(policies, env_config, seeds)
    return out


# ---------------------------------------------------------------- activation dumps

ACTIVATION_HEADER = ["policy_label", "episode", "step", "subtask_label", "ax", "ay", "az", "grip"]


def phase_label(step: int) -> str:
    """Subtask window that a global step index falls in under the canonical sequence."""
    edge = 0
    for name in CANONICAL_SEQUENCE:
        edge += SUBTASKS[name].budget
        if step < edge:
            return name
    return CANONICAL_SEQUENCE[-1]


def activation_dump(policy_sets: Mapping[str, Mapping[str, Policy]], env_config: EnvConfig,
                    seeds: Sequence[int], path: str | Path | None = None) -> list[list]:
    """Per-step applied actions for each policy set on the same seeded episodes.

    A set holding an "e2e" policy runs it for the whole episode and labels its
    steps by the canonical subtask windows; otherwise the three experts run in
    canonical order.
    """
    rows: list[list] = []
    for label, policies in policy_sets.items():
        sequence = [END_TO_END.name] if END_TO_END.name in policies else list(CANONICAL_SEQUENCE)
        for ep, seed in enumerate(seeds):
            res = run_composite_episode(policies, sequence, env_config, seed, record=True)
            step = 0
            for name in sequence:
                for rec in res.traces.get(name, []):
                    sub = phase_label(step) if name == END_TO_END.name else name
                    rows.append([label, ep, step, sub, *(float(v) for v in rec.action)])
                    step += 1
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ACTIVATION_HEADER)
            for r in rows:
                w.writerow([r[0], r[1], r[2], r[3], *(repr(v) for v in r[4:])])
    return rows


def read_activation_csv(path: str | Path) -> list[list]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [[r[0], int(r[1]), int(r[2]), r[3], *map(float, r[4:])] for r in reader]


def activation_distances(rows: Sequence[Sequence], reference: str = "oracle") -> dict[str, dict[str, float]]:
    """Mean L2 distance per (policy label, subtask) to the reference label's action at the same step."""
    ref = {(r[1], r[2]): np.array(r[4:8]) for r in rows if r[0] == reference}
    acc: dict[str, dict[str, list[float]]] = {}
    for r in rows:
        if r[0] == reference or (r[1], r[2]) not in ref:
            continue
        d = float(np.linalg.norm(np.array(r[4:8]) - ref[(r[1], r[2])]))
        acc.setdefault(r[0], {}).setdefault(r[3], []).append(d)
    return {label: {sub: float(np.mean(v)) for sub, v in subs.items()} for label, subs in acc.items()}


def translation_magnitude(rows: Sequence[Sequence], label: str, subtask: str) -> float:
    mags = [np.linalg.norm(r[4:7]) for r in rows if r[0] == label and r[3] == subtask]
    return float(np.mean(mags)) if mags else float("nan")


def dump_activations_for_run(cfg: ExperimentConfig, seed: int, path: str | Path,
                             paths: RunPaths | None = None) -> list[list]:
    """Oracle, learned-expert and (if trained) end-to-end action dumps on shared seeds."""
    paths = paths or RunPaths(Path(cfg.out_dir))
    sets: dict[str, Mapping[str, Policy]] = {"oracle": oracle_policies(cfg.env),
                                             "lse": load_lse_set(paths, seed)}
    e2e_path = paths.checkpoint(seed, "e2e")
    if e2e_path.exists():
        sets["e2e"] = {"e2e": load_actor_policy(e2e_path)}
    seeds = episode_seeds(np.random.default_rng([seed, 17]), cfg.activation_episodes)
    return activation_dump(sets, cfg.env, seeds, path)
