"""Command-line entry point.

Exit codes: 0 success, 1 config error, 2 runtime failure, 3 audit failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from lamasafe.audit import oracle_audit
from lamasafe.config import ConfigError, ExperimentConfig, load_config, resolve_corpus
from lamasafe.core import CLASS_ORDER, LanguageConstraint
from lamasafe.costlm import CostPredictor, RuleOracle, make_provider
from lamasafe.embed import EncoderState, finetune, load_encoder, save_encoder
from lamasafe.marl import trainer
from lamasafe.marl.tasks import make_task
from lamasafe.nn import gradcheck_suite
from lamasafe.text import BUILTIN_CORPORA, DEFAULT_LEXICON, Lexicon, builtin_corpus_path, classify_constraint, parse_corpus_text, sample_triplets

logger = logging.getLogger("lamasafe")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_AUDIT = 3

GRADCHECK_TOL = 1e-4


class AuditFailure(RuntimeError):
    """A diagnostic check found disagreement."""


# ---------------------------------------------------------------------------
# Shared setup
# ---------------------------------------------------------------------------


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    updates = {}
    if args.seed is not None:
        updates["seeds"] = [args.seed]
    if args.out is not None:
        updates["out"] = args.out
    if args.provider is not None:
        updates["provider.kind"] = args.provider
    return load_config(args.config, args.override, updates)


def _encoder(cfg: ExperimentConfig) -> EncoderState:
    """The configured checkpoint, or a freshly fine-tuned encoder."""
    if cfg.encoder is not None:
        return load_encoder(cfg.encoder)
    return _finetuned(cfg)


def _finetuned(cfg: ExperimentConfig) -> EncoderState:
    fresh = EncoderState.fresh(cfg.encoder_dim, cfg.vocab_dim, cfg.margin, seed=cfg.encoder_seed)
    if cfg.rounds == 0:
        return finetune(fresh, [], rounds=0)
    corpus = resolve_corpus(cfg.finetune_corpus, "finetune")
    triplets = sample_triplets(corpus, cfg.triplets, rng_seed=cfg.encoder_seed)
    return finetune(fresh, triplets, rounds=cfg.rounds, lr=cfg.finetune_lr)


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_finetune(args: argparse.Namespace) -> int:
    cfg = _experiment(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    state = _finetuned(cfg)
    save_encoder(state, out / "encoder.json")
    with open(out / "loss_history.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "loss"])
        writer.writerows((k + 1, repr(v)) for k, v in enumerate(state.loss_history))
    summary = {"rounds": len(state.loss_history), "encoder": str(out / "encoder.json")}
    if state.loss_history:
        summary.update(first_loss=state.loss_history[0], last_loss=state.loss_history[-1])
    print(json.dumps(summary))
    return EXIT_OK


def _summary_rows(finals: dict[int, dict]) -> list[list]:
    rows = [[seed, m["step"], m["eval_reward_mean"], m["eval_cost_mean"]] for seed, m in finals.items()]
    if finals:
        rewards = np.array([m["eval_reward_mean"] for m in finals.values()])
        costs = np.array([m["eval_cost_mean"] for m in finals.values()])
        rows.append(["mean", "", rewards.mean(), costs.mean()])
        rows.append(["std", "", rewards.std(), costs.std()])
    return rows


def _write_summary(out: Path, finals: dict[int, dict]) -> None:
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "step", "eval_reward_mean", "eval_cost_mean"])
        writer.writerows(_summary_rows(finals))


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _experiment(args)
    corpus = resolve_corpus(cfg.corpus, family=cfg.family)
    encoder = _encoder(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "experiment.json", cfg.to_dict())
    save_encoder(encoder, out / "encoder.json")
    finals: dict[int, dict] = {}
    for seed in cfg.seeds:
        run_dir = out / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(out / "encoder.json", run_dir / "encoder.json")
        _write_json(run_dir / "experiment.json", {**cfg.to_dict(), "seeds": [seed], "encoder": str((run_dir / "encoder.json").resolve())})
        predictor = CostPredictor(encoder, make_provider(cfg.provider))
        try:
            result = trainer.train(cfg.train, cfg.env, corpus, predictor, seed=seed, out_dir=run_dir, resume=args.resume)
        except Exception:
            _write_summary(out, finals)
            logger.exception("seed %d failed; results of finished seeds kept in %s", seed, out / "summary.csv")
            return EXIT_RUNTIME
        finals[seed] = result.metrics[-1]
        logger.info("seed %d done: reward %.3f cost %.3f", seed, finals[seed]["eval_reward_mean"], finals[seed]["eval_cost_mean"])
    _write_summary(out, finals)
    with open(out / "summary.csv", encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK


def eval_report(records: Sequence[trainer.EpisodeRecord]) -> dict:
    """Aggregate an episode log into the evaluation report."""
    log = [
        {
            "episode": k,
            "constraint": r.constraint,
            "condensed": r.condensed,
            "reward": r.reward,
            "cost": r.cost,
            "length": r.length,
            "violation_steps": r.violation_steps,
            "components": r.components,
        }
        for k, r in enumerate(records)
    ]
    per_constraint: dict[str, dict] = {}
    for r in records:
        row = per_constraint.setdefault(r.constraint, {"episodes": 0, "reward": 0.0, "cost": 0.0})
        row["episodes"] += 1
        row["reward"] += r.reward
        row["cost"] += r.cost
    for row in per_constraint.values():
        row["mean_reward"] = row.pop("reward") / row["episodes"]
        row["mean_cost"] = row.pop("cost") / row["episodes"]
    components = {c.value: 0.0 for c in CLASS_ORDER}
    for r in records:
        for name, v in r.components.items():
            components[name] += v / len(records)
    steps = sum(r.length for r in records)
    return {
        "episodes": len(records),
        "mean_reward": float(np.mean([r.reward for r in records])),
        "mean_cost": float(np.mean([r.cost for r in records])),
        "violation_step_fraction": sum(r.violation_steps for r in records) / steps if steps else 0.0,
        "cost_components": components,
        "per_constraint": per_constraint,
        "episode_log": log,
    }


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = Path(args.checkpoint)
    if not (ckpt / "nets").is_dir():
        raise ConfigError(f"{ckpt} is not a run directory with saved networks")
    if args.config is None and (ckpt / "experiment.json").exists():
        args.config = str(ckpt / "experiment.json")
    cfg = _experiment(args)
    encoder_path = ckpt / "encoder.json"
    encoder = load_encoder(encoder_path) if encoder_path.exists() else _encoder(cfg)
    task = make_task(cfg.env)
    streams = trainer.make_streams(cfg.seeds[0])
    nets = trainer.build_nets(
        task.head_kind, task.obs_dim, task.action_dim, task.n_agents, encoder.dim, cfg.train, streams,
        False, getattr(task, "action_bound", None),
    )
    try:
        trainer.load_nets(ckpt, nets)
    except (FileNotFoundError, ValueError) as exc:
        raise ConfigError(f"checkpoint does not fit the configured environment: {exc}") from exc
    source = trainer.ConstraintSource(resolve_corpus(cfg.corpus, family=cfg.family), CostPredictor(encoder, make_provider(cfg.provider)))
    records = trainer.evaluate(task, nets, source, args.episodes, trainer.eval_seed_for(cfg.seeds[0]), components=True)
    report = eval_report(records)
    out = Path(args.out) if args.out is not None else ckpt
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval_report.json", report)
    print(json.dumps({k: report[k] for k in ("episodes", "mean_reward", "mean_cost", "violation_step_fraction", "cost_components")}))
    return EXIT_OK


def _corpus_path(name: str) -> Path:
    return builtin_corpus_path(name) if name in BUILTIN_CORPORA else Path(name)


def _read_corpus_lines(name: str) -> list[str]:
    path = _corpus_path(name)
    try:
        return parse_corpus_text(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read corpus {path}: {exc}") from exc


def cmd_corpus_check(args: argparse.Namespace) -> int:
    name = args.corpus or _experiment(args).corpus
    lines = _read_corpus_lines(name)
    counts = {c.value: 0 for c in CLASS_ORDER}
    unclassified = []
    for line in lines:
        classes = classify_constraint(line)
        if not classes:
            unclassified.append(line)
        for c in classes:
            counts[c.value] += 1
    print(json.dumps({"entries": len(lines), "class_counts": counts, "unclassified": unclassified}, indent=1))
    return EXIT_AUDIT if unclassified else EXIT_OK


def cmd_oracle_audit(args: argparse.Namespace) -> int:
    cfg = _experiment(args)
    if cfg.provider.kind.value != "rule":
        raise ConfigError("the oracle audit needs the rule provider")
    lexicon = DEFAULT_LEXICON
    if args.lexicon is not None:
        try:
            lexicon = Lexicon.from_json(Path(args.lexicon).read_text(encoding="utf-8"))
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot load lexicon {args.lexicon}: {exc}") from exc
    constraints = [LanguageConstraint(raw=ln, hazard_classes=classify_constraint(ln)) for ln in _read_corpus_lines(args.corpus or cfg.corpus)]
    report = oracle_audit(constraints, RuleOracle(lexicon))
    summary = report.to_dict()
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _write_json(Path(args.out) / "audit.json", summary)
    print(json.dumps({k: summary[k] for k in ("states", "constraints", "checks", "agreement", "matrix")}))
    if report.agreement < 1.0:
        raise AuditFailure(f"oracle agreement {report.agreement:.4f} below 100%")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    errors = gradcheck_suite(args.nets, seed=args.seed or 0)
    worst = max(errors) if errors else 0.0
    print(json.dumps({"nets": len(errors), "max_rel_error": worst, "tolerance": GRADCHECK_TOL}))
    if worst >= GRADCHECK_TOL:
        raise AuditFailure(f"gradient check failed: max relative error {worst:.3g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; // and /* */ comments allowed")
    common.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
    common.add_argument("--out", help="output directory")
    common.add_argument("--provider", choices=["rule", "remote"], help="violation-flag provider")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted config override; VALUE is parsed as JSON when possible")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="lamasafe", description="Language-constrained multi-agent safe RL.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("finetune", parents=[common], help="fine-tune the constraint encoder").set_defaults(func=cmd_finetune)

    p = sub.add_parser("train", parents=[common], help="train every configured seed")
    p.add_argument("--resume", action="store_true", help="continue from checkpoints in the run directories")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="greedy evaluation of a saved run")
    p.add_argument("--checkpoint", required=True, help="run directory written by train")
    p.add_argument("--episodes", type=int, default=10)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("corpus-check", parents=[common], help="classify every corpus entry")
    p.add_argument("corpus", nargs="?", help="built-in corpus name or file path")
    p.set_defaults(func=cmd_corpus_check)

    p = sub.add_parser("oracle-audit", parents=[common], help="compare oracle flags with ground truth on small boards")
    p.add_argument("corpus", nargs="?", help="built-in corpus name or file path")
    p.add_argument("--lexicon", help="lexicon JSON replacing the built-in one")
    p.set_defaults(func=cmd_oracle_audit)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the network backward pass")
    p.add_argument("--nets", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except AuditFailure as exc:
        logger.error("%s", exc)
        return EXIT_AUDIT
    except Exception as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        logger.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
