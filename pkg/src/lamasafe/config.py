"""Experiment configuration: JSON with comments, plus dotted overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from lamasafe.costlm import ProviderConfig
from lamasafe.marl.config import EnvConfig, TrainConfig
from lamasafe.core import HazardClass
from lamasafe.text import BUILTIN_CORPORA, ConstraintCorpus, constraint_family, load_builtin, load_corpus


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


def strip_json_comments(text: str) -> str:
    """Remove ``//`` and ``/* */`` comments outside string literals."""
    out = []
    i, n = 0, len(text)
    in_str = False
    while i < n:
        ch = text[i]
        if in_str:
            out.append(ch)
            if ch == "\\" and i + 1 < n:
                out.append(text[i + 1])
                i += 2
                continue
            if ch == '"':
                in_str = False
            i += 1
        elif ch == '"':
            in_str = True
            out.append(ch)
            i += 1
        elif text.startswith("//", i):
            while i < n and text[i] != "\n":
                i += 1
        elif text.startswith("/*", i):
            end = text.find("*/", i + 2)
            if end < 0:
                raise ConfigError("unterminated block comment")
            i = end + 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    for item in overrides:
        path, value = parse_override(item)
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-object")
        node[path[-1]] = value
    return data


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: str = "grid"
    family: list[str] | None = None
    finetune_corpus: str = "finetune"
    heldout_corpus: str = "heldout"
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    encoder: str | None = None
    encoder_seed: int = 0
    encoder_dim: int = 64
    vocab_dim: int = 1024
    margin: float = 0.2
    triplets: int = 30
    rounds: int = 95
    finetune_lr: float = 0.01
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        for name in (self.corpus, self.finetune_corpus, self.heldout_corpus):
            if name not in BUILTIN_CORPORA and not Path(name).exists():
                raise ConfigError(f"corpus {name!r} is neither built in nor an existing file")
        for c in self.family or []:
            if c not in {h.value for h in HazardClass}:
                raise ConfigError(f"unknown hazard class {c!r} in family")
        if self.encoder is not None and not Path(self.encoder).exists():
            raise ConfigError(f"encoder checkpoint {self.encoder!r} does not exist")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["env"] = self.env.to_dict()
        d["train"] = self.train.to_dict()
        prov = dataclasses.asdict(self.provider)
        prov["kind"] = self.provider.kind.value
        prov.pop("token", None)
        d["provider"] = prov
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ExperimentConfig:
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "env" in data:
                data["env"] = EnvConfig.from_dict(data["env"])
            if "train" in data:
                data["train"] = TrainConfig.from_dict(data["train"])
            data["provider"] = ProviderConfig.from_mapping(data.get("provider"))
            return cls(**data)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(
    path: str | Path | None = None,
    overrides: Sequence[str] = (),
    updates: Mapping[str, Any] | None = None,
) -> ExperimentConfig:
    """Read a commented-JSON config, then apply ``--override`` strings.

    ``updates`` maps dotted keys to already-typed values and is applied last.
    """
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(strip_json_comments(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be an object")
    data = apply_overrides(data, overrides)
    for key, value in (updates or {}).items():
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return ExperimentConfig.from_dict(data)


def resolve_corpus(name: str, split: str | None = None, family: Sequence[str] | None = None) -> ConstraintCorpus:
    """Load a built-in corpus by name or a corpus file by path."""
    if name in BUILTIN_CORPORA:
        corpus = load_builtin(name, split)
    else:
        corpus = load_corpus(name, split=split or "train")
    return constraint_family(corpus, [HazardClass(c) for c in family]) if family else corpus
