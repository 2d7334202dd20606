"""Constraint condensation, violation flags and predicted costs.

Two providers answer "does this description violate the constraint?": a
deterministic keyword oracle and a remote text-generation endpoint over HTTP.
Predicted cost is the flag times the clamped cosine similarity between the
constraint embedding and the description embedding.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import httpx
import numpy as np

from lamasafe.core import HazardClass, LanguageConstraint
from lamasafe.embed import EmbeddingCache, EncoderState, cosine_sim
from lamasafe.envs import goal as goal_env
from lamasafe.text import DEFAULT_LEXICON, EnvDescription, Lexicon, canonical_condensed, classify_constraint

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"
ENDPOINT_ENV = "LAMASAFE_LLM_ENDPOINT"
TOKEN_ENV = "LAMASAFE_LLM_TOKEN"

_TERRAIN = {"lava": HazardClass.LAVA, "water": HazardClass.WATER, "grass": HazardClass.GRASS}

# Radar thresholds on centre distances. The hazard rule counts from the
# agent's edge, so the agent radius is added; a vase touches once the centre
# gap is within the agent radius plus the vase half-diagonal.
DEFAULT_THRESHOLDS = {
    "hazard": goal_env.HAZARD_COST_DISTANCE + goal_env.AGENT_RADIUS,
    "agent": goal_env.COLLISION_DISTANCE,
    "vase": goal_env.AGENT_RADIUS + goal_env.VASE_HALF_SIZE * 2**0.5,
}


class ProviderKind(str, enum.Enum):
    RULE = "rule"
    REMOTE = "remote"


@dataclass(frozen=True)
class ViolationFlag:
    value: int
    provider: ProviderKind = ProviderKind.RULE
    cached: bool = False

    def __post_init__(self):
        if self.value not in (0, 1):
            raise ValueError(f"violation flag must be 0 or 1, got {self.value!r}")


@dataclass(frozen=True)
class PredictedCost:
    value: float
    similarity: float
    flag: int


@dataclass(frozen=True)
class ProviderConfig:
    kind: ProviderKind = ProviderKind.RULE
    endpoint: str | None = None
    token: str | None = field(default=None, repr=False)
    timeout: float = 30.0
    max_retries: int = 3
    max_in_flight: int = 4
    max_tokens: int = 8
    backoff: float = 0.5
    cache_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ProviderKind(self.kind))
        if self.kind is ProviderKind.REMOTE and not self.endpoint:
            raise ValueError(f"remote provider needs an endpoint (set {ENDPOINT_ENV})")
        if self.timeout <= 0 or self.max_in_flight < 1 or self.max_retries < 0:
            raise ValueError("timeout and max_in_flight must be positive, max_retries non-negative")

    @classmethod
    def from_mapping(cls, data: Mapping | None = None, env: Mapping[str, str] | None = None) -> ProviderConfig:
        data = dict(data or {})
        env = os.environ if env is None else env
        if data.get("kind", "rule") == "remote":
            data.setdefault("endpoint", env.get(ENDPOINT_ENV))
            data.setdefault("token", env.get(TOKEN_ENV))
        return cls(**data)


# ---------------------------------------------------------------------------
# Rule oracle
# ---------------------------------------------------------------------------


class RuleOracle:
    """Keyword condensation and entity-based violation judgments."""

    kind = ProviderKind.RULE

    def __init__(self, lexicon: Lexicon = DEFAULT_LEXICON, thresholds: Mapping[str, float] | None = None):
        self.lexicon = lexicon
        self.thresholds = dict(DEFAULT_THRESHOLDS if thresholds is None else thresholds)
        self._classes: dict[str, frozenset[HazardClass]] = {}

    def condense(self, raw: str) -> str:
        if not raw.strip():
            raise ValueError("cannot condense an empty constraint")
        return canonical_condensed(classify_constraint(raw, self.lexicon))

    def classes_of(self, constraint: LanguageConstraint) -> frozenset[HazardClass]:
        text = constraint.condensed or constraint.raw
        if text not in self._classes:
            self._classes[text] = classify_constraint(text, self.lexicon)
        return self._classes[text]

    def violates(self, description: EnvDescription, constraint: LanguageConstraint) -> bool:
        classes = self.classes_of(constraint)
        for kind, qualifier in description.mentioned_entities:
            if kind in _TERRAIN:
                if qualifier == "on" and _TERRAIN[kind] in classes:
                    return True
            elif kind == "agent" and qualifier == "collision":
                if HazardClass.COLLISION in classes:
                    return True
            elif kind in self.thresholds:
                relevant = (
                    (kind == "hazard" and bool(classes & goal_env.HAZARD_CLASSES))
                    or (kind == "agent" and HazardClass.COLLISION in classes)
                    or (kind == "vase" and HazardClass.VASE in classes)
                )
                if relevant and float(qualifier) < self.thresholds[kind]:
                    return True
        return False

    def query(self, description: EnvDescription, constraint: LanguageConstraint) -> ViolationFlag:
        return ViolationFlag(int(self.violates(description, constraint)), ProviderKind.RULE)


# ---------------------------------------------------------------------------
# Remote provider
# ---------------------------------------------------------------------------


def _template(name: str) -> str:
    return (DATA_DIR / name).read_text(encoding="utf-8")


def render_query_prompt(constraint_text: str, observation: str, agent: int) -> str:
    return (
        _template("query_prompt.txt")
        .replace("{human_constraints}", constraint_text)
        .replace("{agent_i_texted_observation}", observation)
        .replace("{i}", str(agent))
    )


def render_condense_prompt(raw: str) -> str:
    return _template("condense_prompt.txt").replace("{human_constraints}", raw)


_ANSWER = re.compile(r"^\W*(yes|no)\b", re.IGNORECASE)


def parse_yes_no(reply: str) -> int | None:
    m = _ANSWER.match(reply)
    if m is None:
        return None
    return 1 if m.group(1).lower() == "yes" else 0


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class RemoteProvider:
    """Text-generation endpoint with retries, bounded concurrency and a flag cache.

    Wire format: POST ``{"prompt", "max_tokens"}`` and read ``{"text"}``.
    Failures never block training: condensation falls back to the rule
    oracle and an unanswerable query yields flag 0 with a warning.
    """

    kind = ProviderKind.REMOTE

    def __init__(self, config: ProviderConfig, client: httpx.Client | None = None, fallback: RuleOracle | None = None):
        self.config = config
        self.fallback = fallback or RuleOracle()
        headers = {"Authorization": f"Bearer {config.token}"} if config.token else {}
        self.client = client or httpx.Client(timeout=config.timeout, headers=headers)
        self._gate = threading.BoundedSemaphore(config.max_in_flight)
        self._lock = threading.Lock()
        self._cache: dict[tuple[str, str], int] = {}
        self.requests = 0
        self.fail_open = 0
        if config.cache_path and Path(config.cache_path).exists():
            for line in Path(config.cache_path).read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self._cache[(rec["constraint_hash"], rec["description_hash"])] = int(rec["flag"])

    def _complete(self, prompt: str) -> str | None:
        """One prompt with retries; ``None`` once retries are exhausted."""
        for attempt in range(self.config.max_retries + 1):
            try:
                with self._gate:
                    self.requests += 1
                    resp = self.client.post(
                        self.config.endpoint, json={"prompt": prompt, "max_tokens": self.config.max_tokens}
                    )
                resp.raise_for_status()
                return str(resp.json()["text"])
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                logger.warning("remote provider attempt %d failed: %s", attempt + 1, exc)
            if attempt < self.config.max_retries and self.config.backoff > 0:
                time.sleep(self.config.backoff * 2**attempt)
        return None

    def condense(self, raw: str) -> str:
        if not raw.strip():
            raise ValueError("cannot condense an empty constraint")
        reply = self._complete(render_condense_prompt(raw))
        if reply is None or not reply.strip():
            logger.warning("remote condensation failed; falling back to the rule oracle")
            return self.fallback.condense(raw)
        return reply.strip().splitlines()[0]

    def query(self, description: EnvDescription, constraint: LanguageConstraint) -> ViolationFlag:
        text = constraint.condensed or constraint.raw
        key = (_digest(text), _digest(description.text))
        if key in self._cache:
            return ViolationFlag(self._cache[key], ProviderKind.REMOTE, cached=True)
        prompt = render_query_prompt(text, description.text, description.agent)
        flag = None
        for _ in range(self.config.max_retries + 1):
            reply = self._complete(prompt)
            if reply is None:
                break
            flag = parse_yes_no(reply)
            if flag is not None:
                break
            logger.warning("unparseable remote reply %r", reply[:80])
        if flag is None:
            self.fail_open += 1
            logger.error("FAIL-OPEN: no usable remote answer, treating agent %d as non-violating", description.agent)
            return ViolationFlag(0, ProviderKind.REMOTE)
        with self._lock:
            self._cache[key] = flag
            if self.config.cache_path:
                rec = {"constraint_hash": key[0], "description_hash": key[1], "flag": flag}
                with open(self.config.cache_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec) + "\n")
        return ViolationFlag(flag, ProviderKind.REMOTE)


def make_provider(config: ProviderConfig, lexicon: Lexicon = DEFAULT_LEXICON):
    if config.kind is ProviderKind.REMOTE:
        return RemoteProvider(config, fallback=RuleOracle(lexicon))
    return RuleOracle(lexicon)


def condense(raw: str, provider) -> str:
    return provider.condense(raw)


def query_violation(description: EnvDescription, constraint: LanguageConstraint, provider) -> ViolationFlag:
    if not constraint.condensed:
        raise ValueError("constraint must be condensed before querying violations")
    return provider.query(description, constraint)


# ---------------------------------------------------------------------------
# Predicted cost
# ---------------------------------------------------------------------------


def predict_cost(e_l: np.ndarray, e_o: np.ndarray, flag: ViolationFlag | int) -> PredictedCost:
    """``flag * max(0, e_l . e_o)``."""
    v = flag.value if isinstance(flag, ViolationFlag) else int(flag)
    sim = cosine_sim(e_l, e_o)
    return PredictedCost(value=sim if v == 1 else 0.0, similarity=sim, flag=v)


class CostPredictor:
    """Per-step cost prediction with embedding and flag caches.

    Flags are cached by (condensed constraint, description text); a repeated
    step therefore reaches neither the provider nor the encoder again.
    """

    def __init__(self, encoder: EncoderState, provider, embeddings: EmbeddingCache | None = None):
        self.encoder = encoder
        self.provider = provider
        self.embeddings = embeddings or EmbeddingCache()
        self._flags: dict[tuple[str, str], int] = {}
        self._costs: dict[tuple[str, str], PredictedCost] = {}
        self.provider_calls = 0

    def prepare(self, constraint: LanguageConstraint) -> LanguageConstraint:
        """Condense and embed a freshly sampled constraint."""
        condensed = constraint.condensed or self.provider.condense(constraint.raw)
        return constraint.with_condensed(condensed).with_embedding(self.embeddings.get(self.encoder, condensed))

    def flag(self, description: EnvDescription, constraint: LanguageConstraint) -> ViolationFlag:
        key = (constraint.condensed, description.text)
        if key in self._flags:
            return ViolationFlag(self._flags[key], self.provider.kind, cached=True)
        self.provider_calls += 1
        flag = query_violation(description, constraint, self.provider)
        self._flags[key] = flag.value
        return flag

    def predict(self, description: EnvDescription, constraint: LanguageConstraint) -> PredictedCost:
        key = (constraint.condensed, description.text)
        hit = self._costs.get(key)
        if hit is not None:
            return hit
        if constraint.embedding is None:
            raise ValueError("constraint must be embedded before predicting costs")
        e_o = self.embeddings.get(self.encoder, description.text)
        cost = predict_cost(constraint.embedding, e_o, self.flag(description, constraint))
        self._costs[key] = cost
        return cost

    def predict_step(self, descriptions: Sequence[EnvDescription], constraint: LanguageConstraint) -> list[PredictedCost]:
        if isinstance(self.provider, RemoteProvider) and len(descriptions) > 1:
            with ThreadPoolExecutor(max_workers=self.provider.config.max_in_flight) as pool:
                return list(pool.map(lambda d: self.predict(d, constraint), descriptions))
        return [self.predict(d, constraint) for d in descriptions]


def predict_costs_step(
    descriptions: Sequence[EnvDescription],
    constraint: LanguageConstraint,
    encoder: EncoderState,
    provider,
    predictor: CostPredictor | None = None,
) -> list[PredictedCost]:
    predictor = predictor or CostPredictor(encoder, provider)
    return predictor.predict_step(descriptions, constraint)
