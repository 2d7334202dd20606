"""Training and environment configuration."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Any, Mapping


class Algorithm(str, enum.Enum):
    MAPPO = "MAPPO"
    HAPPO = "HAPPO"
    SMALL_MAPPO = "SMALL-MAPPO"
    SMALL_HAPPO = "SMALL-HAPPO"
    MAPPO_LAGRANGE = "MAPPO-Lagrange"
    HAPPO_LAGRANGE = "HAPPO-Lagrange"

    @property
    def sequential(self) -> bool:
        return self in (Algorithm.HAPPO, Algorithm.SMALL_HAPPO, Algorithm.HAPPO_LAGRANGE)

    @property
    def default_cost_source(self) -> str:
        if self in (Algorithm.SMALL_MAPPO, Algorithm.SMALL_HAPPO):
            return "predicted"
        if self in (Algorithm.MAPPO_LAGRANGE, Algorithm.HAPPO_LAGRANGE):
            return "ground_truth"
        return "none"

    @classmethod
    def parse(cls, name: str | Algorithm) -> Algorithm:
        if isinstance(name, Algorithm):
            return name
        for alg in cls:
            if alg.value.lower() == str(name).lower():
                return alg
        raise ValueError(f"unknown algorithm {name!r}; choose from {[a.value for a in cls]}")


COST_SOURCES = ("auto", "none", "predicted", "ground_truth", "zero")


@dataclass
class TrainConfig:
    algorithm: Algorithm = Algorithm.SMALL_MAPPO
    gamma: float = 0.95
    gae_lambda: float = 0.95
    clip: float = 0.2
    ppo_epochs: int = 5
    batch_size: int = 1024
    steps_per_update: int = 100
    actor_lr: float = 9e-5
    critic_lr: float = 3e-4
    eval_interval: int = 1000
    eval_episodes: int = 10
    entropy_coef: float = 0.01
    hidden: tuple[int, ...] = (64, 64)
    lambda_init: float = 0.78
    lambda_lr: float = 1e-5
    cost_budget: float = 0.0
    total_steps: int = 100_000
    n_envs: int = 8
    normalize_advantages: bool = True
    max_grad_norm: float | None = None
    cost_source: str = "auto"
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        self.algorithm = Algorithm.parse(self.algorithm)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        positive = ("clip", "ppo_epochs", "batch_size", "steps_per_update", "actor_lr", "critic_lr",
                    "eval_interval", "eval_episodes", "total_steps", "n_envs")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_init < 0 or self.lambda_lr < 0 or self.entropy_coef < 0:
            raise ValueError("lambda_init, lambda_lr and entropy_coef must be non-negative")
        if self.cost_source not in COST_SOURCES:
            raise ValueError(f"cost_source must be one of {COST_SOURCES}")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    @property
    def resolved_cost_source(self) -> str:
        return self.algorithm.default_cost_source if self.cost_source == "auto" else self.cost_source

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["algorithm"] = self.algorithm.value
        d["hidden"] = list(self.hidden)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EnvConfig:
    name: str = "grid"
    layout: str = "random"
    size: int = 10
    hazard_count: int = 20
    n_agents: int = 2
    difficulty: str = "easy"
    max_steps: int | None = None
    corpus: str = "grid"

    def __post_init__(self):
        if self.name not in ("grid", "goal"):
            raise ValueError(f"unknown environment {self.name!r}")
        if self.name == "grid" and self.layout not in ("random", "onepath"):
            raise ValueError(f"unknown grid layout {self.layout!r}")
        if self.n_agents < 1:
            raise ValueError("n_agents must be at least 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EnvConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown environment options: {sorted(unknown)}")
        return cls(**data)
