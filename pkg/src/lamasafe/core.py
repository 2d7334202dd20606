"""Shared vocabulary of the language-constrained Markov game.

Agents share one team reward; every agent carries its own cost. Costs come
from a natural-language constraint sampled at the start of each episode, so
the types here keep the raw constraint, its condensed form and its embedding
together.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Mapping, Sequence

import numpy as np

if TYPE_CHECKING:
    from lamasafe.text import ConstraintCorpus


class HazardClass(str, enum.Enum):
    """Entity or behaviour a constraint can prohibit."""

    LAVA = "lava"
    WATER = "water"
    GRASS = "grass"
    BLUE_HAZARD = "blue_hazard"
    VASE = "vase"
    COLLISION = "collision"


# Canonical ordering used wherever a class set is rendered as text.
CLASS_ORDER: tuple[HazardClass, ...] = tuple(HazardClass)


def sorted_classes(classes) -> list[HazardClass]:
    return [c for c in CLASS_ORDER if c in set(classes)]


@dataclass(frozen=True)
class StepOutcome:
    """Result of one joint step.

    ``cost_truth`` is the environment's hidden violation indicator. Trainers
    only forward it to evaluation metrics; the policy update path consumes
    predicted costs (or, for the ``*-Lagrange`` baselines, an explicit
    ground-truth cost source).
    """

    team_reward: float
    cost_truth: tuple[float, ...]
    done: bool
    info: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class LanguageConstraint:
    raw: str
    condensed: str = ""
    embedding: np.ndarray | None = field(default=None, compare=False, repr=False)
    hazard_classes: frozenset[HazardClass] = frozenset()

    def __post_init__(self):
        if self.embedding is not None:
            norm = float(np.linalg.norm(self.embedding))
            if not math.isclose(norm, 1.0, abs_tol=1e-6):
                raise ValueError(f"constraint embedding must be unit norm, got {norm}")
        if self.raw.strip() and self.condensed == "" and self.embedding is not None:
            raise ValueError("an embedded constraint needs its condensed text")

    def with_condensed(self, condensed: str) -> LanguageConstraint:
        if self.raw.strip() and not condensed.strip():
            raise ValueError("condensed text must be non-empty for a non-empty constraint")
        return dataclasses.replace(self, condensed=condensed)

    def with_embedding(self, embedding: np.ndarray) -> LanguageConstraint:
        return dataclasses.replace(self, embedding=np.asarray(embedding, dtype=np.float64))


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    """Return ``sum_t gamma**t * r_t``."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    total = 0.0
    discount = 1.0
    for t, r in enumerate(rewards):
        r = float(r)
        if not math.isfinite(r):
            raise ValueError(f"non-finite reward {r!r} at timestep {t}")
        total += discount * r
        discount *= gamma
    return total


def discounted_cost_return(costs_per_agent: Sequence[Sequence[float]], gamma: float) -> float:
    """Discounted sum over time of the summed per-agent costs.

    Agents are summed first, then discounted, i.e. the expected cost sum of
    all agents.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    total = 0.0
    discount = 1.0
    for t, step_costs in enumerate(costs_per_agent):
        step_sum = 0.0
        for c in step_costs:
            c = float(c)
            if not math.isfinite(c) or c < 0.0:
                raise ValueError(f"costs must be finite and non-negative, got {c!r} at timestep {t}")
            step_sum += c
        total += discount * step_sum
        discount *= gamma
    return total


def sample_constraint(corpus: ConstraintCorpus, rng_seed: int | np.random.Generator) -> LanguageConstraint:
    """Draw one constraint uniformly from ``corpus``.

    Condensation and embedding are left empty; the cost module fills them.
    """
    if len(corpus.entries) == 0:
        raise ValueError("cannot sample from an empty constraint corpus")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    entry = corpus.entries[int(rng.integers(len(corpus.entries)))]
    return LanguageConstraint(raw=entry.raw, hazard_classes=entry.hazard_classes)
