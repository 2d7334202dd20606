import csv
import json

import numpy as np
import pytest

from lamasafe.cli import eval_report, main
from lamasafe.config import ConfigError, ExperimentConfig, apply_overrides, load_config, strip_json_comments
from lamasafe.embed import EncoderState, load_encoder
from lamasafe.marl.trainer import EpisodeRecord
from lamasafe.text import DEFAULT_LEXICON, HazardClass

TINY_TRAIN = [
    "--override", "train.total_steps=200",
    "--override", "train.steps_per_update=50",
    "--override", "train.n_envs=2",
    "--override", "train.batch_size=64",
    "--override", "train.ppo_epochs=1",
    "--override", "train.eval_interval=100",
    "--override", "train.eval_episodes=2",
    "--override", "train.hidden=[8]",
    "--override", "env.size=6",
    "--override", "env.hazard_count=4",
    "--override", "rounds=3",
    "--override", "encoder_dim=8",
]


def test_help_and_usage_errors(capsys):
    assert main(["--help"]) == 0
    assert main([]) == 1
    assert main(["nonsense"]) == 1
    assert main(["gradcheck", "--nets", "abc"]) == 1


def test_invalid_algorithm_is_config_error(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--override", "train.algorithm=PPO"]) == 1
    assert not (tmp_path / "seed_0").exists()
    assert main(["train", "--override", "bogus_key=1"]) == 1
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 1


def test_finetune_outputs_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["finetune", "--out", str(a)]) == 0
    assert main(["finetune", "--out", str(b)]) == 0
    assert (a / "encoder.json").read_bytes() == (b / "encoder.json").read_bytes()
    with open(a / "loss_history.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["round", "loss"] and len(rows) == 96
    assert float(rows[-1][1]) <= float(rows[1][1])


def test_finetune_zero_rounds_equals_fresh_encoder(tmp_path):
    assert main(["finetune", "--out", str(tmp_path), "--override", "rounds=0"]) == 0
    state = load_encoder(tmp_path / "encoder.json")
    assert np.array_equal(state.projection, EncoderState.fresh(seed=0).projection)
    assert state.loss_history == []


def test_train_three_seeds_summary(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--override", "seeds=[0,1,2]", *TINY_TRAIN]) == 0
    with open(out / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["seed"] for r in rows] == ["0", "1", "2", "mean", "std"]
    costs = [float(r["eval_cost_mean"]) for r in rows[:3]]
    assert float(rows[3]["eval_cost_mean"]) == pytest.approx(np.mean(costs))
    assert float(rows[4]["eval_cost_mean"]) == pytest.approx(np.std(costs))
    for s in range(3):
        last = json.loads((out / f"seed_{s}" / "metrics.jsonl").read_text().splitlines()[-1])
        assert float(rows[s]["eval_reward_mean"]) == pytest.approx(last["eval_reward_mean"])
    embedded = json.loads((out / "seed_1" / "experiment.json").read_text())
    assert embedded["seeds"] == [1] and load_config(out / "seed_1" / "experiment.json").encoder


def test_train_rerun_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--out", str(tmp_path / name), "--seed", "5", *TINY_TRAIN]) == 0
    a = (tmp_path / "a" / "seed_5" / "metrics.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "seed_5" / "metrics.jsonl").read_bytes() and a


def test_train_resume_keeps_steps_monotonic(tmp_path):
    out = str(tmp_path / "run")
    assert main(["train", "--out", out, *TINY_TRAIN]) == 0
    assert main(["train", "--out", out, "--resume", *TINY_TRAIN, "--override", "train.total_steps=400"]) == 0
    steps = [json.loads(l)["step"] for l in (tmp_path / "run" / "seed_0" / "metrics.jsonl").read_text().splitlines()]
    assert steps == sorted(steps) and steps[-1] == 400 and len(set(steps)) == len(steps)


def test_train_runtime_failure_keeps_partial_summary(tmp_path, monkeypatch):
    from lamasafe.marl import trainer

    real = trainer.train

    def flaky(cfg, env, corpus, predictor, seed=0, **kw):
        if seed == 1:
            raise RuntimeError("boom")
        return real(cfg, env, corpus, predictor, seed=seed, **kw)

    monkeypatch.setattr(trainer, "train", flaky)
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--override", "seeds=[0,1]", *TINY_TRAIN]) == 2
    with open(out / "summary.csv") as fh:
        assert [r["seed"] for r in csv.DictReader(fh)] == ["0", "mean", "std"]


def test_eval_report_totals_match_log(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), *TINY_TRAIN]) == 0
    assert main(["eval", "--checkpoint", str(out / "seed_0")]) == 0
    report = json.loads((out / "seed_0" / "eval_report.json").read_text())
    log = report["episode_log"]
    assert report["episodes"] == len(log) == 10
    assert report["mean_cost"] == pytest.approx(np.mean([e["cost"] for e in log]))
    assert report["mean_reward"] == pytest.approx(np.mean([e["reward"] for e in log]))
    steps = sum(e["length"] for e in log)
    assert report["violation_step_fraction"] == pytest.approx(sum(e["violation_steps"] for e in log) / steps)
    for e in log:
        assert sum(e["components"].values()) >= e["cost"] - 1e-9
    per = report["per_constraint"]
    assert sum(row["episodes"] for row in per.values()) == 10


def test_eval_hazard_free_board_has_zero_hazard_component(tmp_path, capsys):
    out = tmp_path / "run"
    args = [*TINY_TRAIN, "--override", "env.hazard_count=0", "--override", 'family=["water"]']
    assert main(["train", "--out", str(out), *args]) == 0
    assert main(["eval", "--checkpoint", str(out / "seed_0"), "--episodes", "4"]) == 0
    report = json.loads((out / "seed_0" / "eval_report.json").read_text())
    assert report["cost_components"]["water"] == 0.0 and report["mean_cost"] == 0.0


def test_eval_mismatched_environment_is_config_error(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), *TINY_TRAIN]) == 0
    assert main(["eval", "--checkpoint", str(out / "seed_0"), "--override", "env.n_agents=3"]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "nowhere")]) == 1


def test_eval_report_helper():
    recs = [
        EpisodeRecord(2.0, 1.0, 10, 1, "a", "avoid: water", {"water": 1.0}),
        EpisodeRecord(4.0, 0.0, 30, 0, "a", "avoid: water", {"water": 0.0}),
    ]
    r = eval_report(recs)
    assert r["mean_reward"] == 3.0 and r["violation_step_fraction"] == 1 / 40
    assert r["per_constraint"]["a"] == {"episodes": 2, "mean_reward": 3.0, "mean_cost": 0.5}
    assert r["cost_components"]["water"] == 0.5 and r["cost_components"]["lava"] == 0.0


def test_corpus_check(tmp_path, capsys):
    assert main(["corpus-check", "grid"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["unclassified"] == [] and sum(report["class_counts"].values()) >= report["entries"]
    bad = tmp_path / "bad.txt"
    bad.write_text("Avoid the water.\nPurple monkey dishwasher.\n")
    assert main(["corpus-check", str(bad)]) == 3
    assert json.loads(capsys.readouterr().out)["unclassified"] == ["Purple monkey dishwasher."]
    assert main(["corpus-check", str(tmp_path / "missing.txt")]) == 1


def test_oracle_audit(tmp_path, capsys):
    assert main(["oracle-audit", "grid", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "audit.json").read_text())["agreement"] == 1.0
    broken = tmp_path / "lexicon.json"
    broken.write_text(DEFAULT_LEXICON.without(HazardClass.WATER, "swim", "water").to_json())
    assert main(["oracle-audit", "grid", "--lexicon", str(broken)]) == 3
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    capsys.readouterr()
    assert main(["oracle-audit", str(empty)]) == 0
    assert json.loads(capsys.readouterr().out)["checks"] == 0
    assert main(["oracle-audit", "grid", "--provider", "remote"]) == 1


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--nets", "5"]) == 0
    assert json.loads(capsys.readouterr().out)["nets"] == 5


def test_comment_stripping_and_overrides(tmp_path):
    text = '{\n // line\n "rounds": 7, /* block */ "corpus": "goal",\n "out": "a//b" }'
    assert json.loads(strip_json_comments(text)) == {"rounds": 7, "corpus": "goal", "out": "a//b"}
    path = tmp_path / "c.json"
    path.write_text(text)
    cfg = load_config(path, ["train.algorithm=HAPPO", "env.size=7", "out=plain text"])
    assert cfg.rounds == 7 and cfg.train.algorithm.value == "HAPPO" and cfg.env.size == 7 and cfg.out == "plain text"
    with pytest.raises(ConfigError):
        strip_json_comments('{"a": 1 /* open')
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(ConfigError):
        ExperimentConfig(seeds=[])
    with pytest.raises(ConfigError):
        ExperimentConfig(family=["fire"])


def test_config_defaults_and_token_not_saved():
    cfg = load_config(None, ['provider={"kind": "remote", "endpoint": "http://x", "token": "hidden"}'])
    d = cfg.to_dict()
    assert "token" not in d["provider"] and d["provider"]["kind"] == "remote"
    assert ExperimentConfig.from_dict(json.loads(json.dumps(ExperimentConfig().to_dict()))) == ExperimentConfig()
