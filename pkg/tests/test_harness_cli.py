import csv
import json

import numpy as np
import pytest
import yaml

from pickplace_hrl import harness
from pickplace_hrl.cli import main
from pickplace_hrl.errors import ConfigurationError
from pickplace_hrl.harness import (
    ACTIVATION_HEADER,
    ExperimentConfig,
    RunPaths,
    activation_distances,
    activation_dump,
    config_from_dict,
    load_config,
    phase_label,
    read_activation_csv,
    translation_magnitude,
)
from pickplace_hrl.metrics import read_metrics
from pickplace_hrl.subtasks import episode_seeds, oracle_policies

TINY = {
    "lse": {"epoch_steps": 300, "max_env_steps": 600, "eval_episodes": 5, "batches_per_update": 2,
            "batch_size": 32, "ddpg": {"hidden_dims": [16, 16]}},
    "e2e": {"epoch_steps": 300, "max_env_steps": 600, "eval_episodes": 5, "batches_per_update": 2,
            "batch_size": 32, "ddpg": {"hidden_dims": [16, 16]}},
    "bc": {"demos_per_round": 10, "epoch_steps": 500, "max_env_steps": 1000, "eval_episodes": 5,
           "epochs_per_round": 1, "hidden_dims": [16, 16]},
    "hlc": {"max_env_steps": 1500, "eval_every": 1, "eval_episodes": 5, "hidden_dim": 8,
            "gae": {"rollouts_per_update": 4}},
    "seeds": [0],
    "eval_episodes": 5,
    "fine_tune_budget": 600,
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def cli(*args):
    return main([str(a) for a in args])


def test_empty_config_gives_reference_defaults(tmp_path):
    (tmp_path / "empty.yaml").write_text("")
    cfg = load_config(tmp_path / "empty.yaml")
    assert cfg == ExperimentConfig()
    assert cfg.seeds == [0, 1, 2] and cfg.threshold == 0.9 and cfg.e2e.max_env_steps == 500_000


def test_config_overrides_and_errors(tiny_config):
    cfg = load_config(tiny_config)
    assert cfg.lse.ddpg.hidden_dims == (16, 16) and cfg.lse.ddpg.gamma == 0.98
    assert cfg.hlc.gae.rollouts_per_update == 4 and cfg.hlc.gae.gamma == 0.99
    with pytest.raises(ConfigurationError):
        config_from_dict({"lse": {"epochs": 3}})
    with pytest.raises(ConfigurationError):
        config_from_dict({"colour": "red"})
    with pytest.raises(ConfigurationError):
        config_from_dict({"seeds": []})
    with pytest.raises(ConfigurationError):
        load_config(tiny_config.parent / "absent.yaml")
    assert config_from_dict({"deterministic": True, "hlc": {"gae": {"workers": 4}}}).for_run().hlc.gae.workers == 1
    assert config_from_dict(cfg.to_dict()) == cfg


def test_hlc_stage_fails_fast_without_approach_checkpoint(tmp_path, tiny_config, capsys):
    out = tmp_path / "run"
    for sub in ("approach", "manipulate", "retract"):
        assert cli("train-lse", "--subtask", sub, "--config", tiny_config, "--out", out, "--seed", 0) == 0
    ckpt = RunPaths(out).checkpoint(0, "approach")
    assert ckpt.exists()
    ckpt.unlink()
    cfg = config_from_dict({**TINY, "out_dir": str(out)})
    with pytest.raises(ConfigurationError, match="approach"):
        harness.train_hlc_stage(cfg, 0, RunPaths(out))
    capsys.readouterr()
    assert cli("train-hlc", "--config", tiny_config, "--out", out, "--seed", 0) == 2
    assert "approach" in capsys.readouterr().err


def test_all_verbs_run_end_to_end(tmp_path, tiny_config, capsys):
    out = tmp_path / "run"
    common = ("--config", tiny_config, "--out", out, "--seed", 0)
    assert cli("curriculum", *common) == 0
    res = json.loads(capsys.readouterr().out)
    assert [s["stage"] for s in res[0]["stages"]] == ["approach", "manipulate", "retract", "hlc"]
    assert (out / "seed_0" / "curriculum_ddpg_her.json").exists()

    assert cli("curriculum", "--method", "bc", *common) == 0
    res = json.loads(capsys.readouterr().out)
    assert [s["stage"] for s in res[0]["stages"]] == ["bc_approach", "bc_manipulate", "bc_retract", "hlc_bc"]

    assert cli("train-e2e", *common) == 0
    assert cli("train-bc", "--subtask", "retract", *common, "--steps", 500) == 0
    capsys.readouterr()

    for name in ("hlc", "e2e", "retract", "hlc_bc"):
        assert cli("evaluate", "--checkpoint", out / "seed_0" / f"{name}.npz", "--episodes", 3, *common) == 0
        ev = json.loads(capsys.readouterr().out)
        assert ev["episodes"] == 3 and 0.0 <= ev["success_rate"] <= 1.0

    assert cli("activations", *common) == 0
    act = json.loads(capsys.readouterr().out)
    assert act[0]["rows"] == 3 * 10 * 50

    assert cli("report", *common) == 0
    report = capsys.readouterr().out
    for label in ("DDPG+HER LSE", "BC LSE", "DDPG+HER end-to-end"):
        assert label in report

    log = (out / "stages.log").read_text().splitlines()
    starts = [line for line in log if "\tstart" in line]
    ends = [line for line in log if "\tend" in line]
    assert len(starts) == len(ends)
    # stages never overlap: every start is followed by its own end before the next start
    events = [line.split("\t")[3] for line in log if line.split("\t")[3] in ("start", "end")]
    assert events == ["start", "end"] * len(starts)

    rows = read_metrics(out / "metrics.csv")
    assert all(0.0 <= r.success_rate <= 1.0 for r in rows)
    # each run writes one contiguous block whose env steps strictly increase
    blocks = []
    for r in rows:
        key = (r.method, r.subtask, r.seed)
        if not blocks or blocks[-1][0] != key or r.env_steps <= blocks[-1][1][-1]:
            blocks.append((key, []))
        blocks[-1][1].append(r.env_steps)
    assert len(blocks) == 10
    assert all(r.sequence_accuracy is not None for r in rows if r.subtask == "hlc")


def test_missing_checkpoint_is_reported(tmp_path, capsys):
    assert cli("evaluate", "--checkpoint", tmp_path / "nope.npz") == 2
    assert "nope.npz" in capsys.readouterr().err


def test_deterministic_rerun_is_byte_identical(tmp_path, tiny_config):
    files = []
    for run in ("a", "b"):
        out = tmp_path / run
        for sub in ("approach", "manipulate", "retract"):
            assert cli("train-lse", "--subtask", sub, "--config", tiny_config, "--out", out, "--seed", 4,
                       "--deterministic") == 0
        assert cli("train-hlc", "--config", tiny_config, "--out", out, "--seed", 4, "--deterministic") == 0
        files.append(out / "metrics.csv")
    assert files[0].read_bytes() == files[1].read_bytes()
    with open(files[0], newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(r["wall_clock_seconds"] == "" for r in rows)


def test_fine_tune_touches_only_its_own_checkpoint(tmp_path, tiny_config, capsys):
    out = tmp_path / "run"
    for sub in ("approach", "manipulate", "retract"):
        assert cli("train-lse", "--subtask", sub, "--config", tiny_config, "--out", out, "--seed", 0) == 0
    before = {p.name: p.read_bytes() for p in (out / "seed_0").glob("*.npz")}
    capsys.readouterr()
    assert cli("fine-tune", "--geometry", "thin_cylinder", "--config", tiny_config, "--out", out,
               "--seed", 0, "--steps", 300) == 0
    res = json.loads(capsys.readouterr().out)[0]
    assert res["env_steps"] >= 300 and res["geometry"] == "thin_cylinder"
    after = {p.name: p.read_bytes() for p in (out / "seed_0").glob("*.npz")}
    assert set(after) - set(before) == {"retract_thin_cylinder.npz"}
    assert all(after[name] == data for name, data in before.items())
    with pytest.raises(SystemExit):
        cli("fine-tune", "--geometry", "huge", "--config", tiny_config, "--out", out)


def test_activation_dump_layout(tmp_path):
    cfg = ExperimentConfig()
    orc = oracle_policies(cfg.env)
    seeds = episode_seeds(np.random.default_rng(5), 10)
    rows = activation_dump({"oracle": orc, "copy": dict(orc)}, cfg.env, seeds, tmp_path / "act.csv")
    assert len(rows) == 2 * 10 * 50
    back = read_activation_csv(tmp_path / "act.csv")
    assert back == rows
    with open(tmp_path / "act.csv") as fh:
        assert next(csv.reader(fh)) == ACTIVATION_HEADER
    dist = activation_distances(rows)
    assert dist == {"copy": {"approach": 0.0, "manipulate": 0.0, "retract": 0.0}}
    assert [r[3] for r in rows[:50]] == [phase_label(t) for t in range(50)]
    # oracle manipulation barely translates the gripper
    assert translation_magnitude(rows, "oracle", "manipulate") < 0.2
