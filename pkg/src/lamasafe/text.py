"""Constraint corpora, keyword classification and rule-based descriptors.

Everything textual that is not an embedding lives here: the tokenizer shared
with the encoder, the hazard lexicon, corpus loading, triplet sampling for
encoder fine-tuning, and the compact per-agent environment descriptions.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from lamasafe.core import HazardClass, sorted_classes
from lamasafe.envs import goal as goal_env
from lamasafe.envs import grid as grid_env

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

# Inflections folded onto one form. Every value is a fixed point of the table,
# which keeps tokenize() idempotent.
SYNONYMS: dict[str, str] = {
    "circles": "circle",
    "collisions": "collision",
    "colliding": "collide",
    "collides": "collide",
    "crashing": "crash",
    "crashes": "crash",
    "hitting": "hit",
    "hits": "hit",
    "bumping": "bump",
    "bumps": "bump",
    "ponds": "pond",
    "lakes": "lake",
    "seas": "sea",
    "oceans": "ocean",
    "skies": "sky",
    "skys": "sky",
    "heavens": "heaven",
    "clouds": "cloud",
    "stars": "star",
    "mirrors": "mirror",
    "reflections": "reflection",
    "reflects": "reflect",
    "raindrops": "raindrop",
    "hazards": "hazard",
    "vases": "vase",
    "cubes": "cube",
    "robots": "robot",
    "agents": "agent",
    "tiles": "tile",
    "meadows": "meadow",
    "swimming": "swim",
    "rusting": "rust",
}

_POSSESSIVE = re.compile(r"['’]s\b")
_APOSTROPHE = re.compile(r"['’]")
_NON_WORD = re.compile(r"[^a-z0-9_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, drop possessives and punctuation, fold synonyms."""
    text = _POSSESSIVE.sub("", text.lower())
    text = _APOSTROPHE.sub("", text)
    return [SYNONYMS.get(tok, tok) for tok in _NON_WORD.sub(" ", text).split()]


def synonym_table_hash() -> str:
    return hashlib.sha256(json.dumps(SYNONYMS, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Lexicon and classification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Lexicon:
    """Keyword lexicon for :func:`classify_constraint`.

    ``terms`` entries are single tokens or space-separated phrases matched on
    token boundaries. ``shape_pairs`` classes need one token from each group in
    the same sentence. Terrain classes in ``licensable`` are ignored inside
    permissive clauses ("lava and grass are safe").
    """

    terms: Mapping[HazardClass, frozenset[str]]
    shape_pairs: Mapping[HazardClass, tuple[frozenset[str], frozenset[str]]] = field(default_factory=dict)
    bare_blue: HazardClass | None = HazardClass.WATER
    permissive: frozenset[str] = frozenset()
    prohibitive: frozenset[str] = frozenset()
    licensable: frozenset[HazardClass] = frozenset()

    def without(self, cls: HazardClass, *terms: str) -> Lexicon:
        """Copy with some terms of ``cls`` removed (fault injection)."""
        new_terms = dict(self.terms)
        new_terms[cls] = frozenset(t for t in self.terms.get(cls, ()) if t not in terms)
        return Lexicon(new_terms, self.shape_pairs, self.bare_blue, self.permissive, self.prohibitive, self.licensable)

    def to_json(self) -> str:
        return json.dumps(
            {
                "terms": {c.value: sorted(v) for c, v in self.terms.items()},
                "shape_pairs": {c.value: [sorted(a), sorted(b)] for c, (a, b) in self.shape_pairs.items()},
                "bare_blue": self.bare_blue.value if self.bare_blue else None,
                "permissive": sorted(self.permissive),
                "prohibitive": sorted(self.prohibitive),
                "licensable": sorted(c.value for c in self.licensable),
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> Lexicon:
        data = json.loads(text)
        return cls(
            terms={HazardClass(c): frozenset(v) for c, v in data["terms"].items()},
            shape_pairs={HazardClass(c): (frozenset(a), frozenset(b)) for c, (a, b) in data["shape_pairs"].items()},
            bare_blue=HazardClass(data["bare_blue"]) if data.get("bare_blue") else None,
            permissive=frozenset(data["permissive"]),
            prohibitive=frozenset(data["prohibitive"]),
            licensable=frozenset(HazardClass(c) for c in data["licensable"]),
        )


DEFAULT_LEXICON = Lexicon(
    terms={
        HazardClass.LAVA: frozenset({"lava"}),
        HazardClass.WATER: frozenset(
            {
                "water", "swim", "rust", "rain", "raindrop", "pond", "lake", "sea", "ocean",
                "sky", "heaven", "cloud", "celestial", "star", "mirror", "reflection", "reflect",
            }
        ),
        HazardClass.GRASS: frozenset({"grass", "meadow"}),
        HazardClass.BLUE_HAZARD: frozenset({"blue_hazard"}),
        HazardClass.VASE: frozenset({"vase", "cube"}),
        HazardClass.COLLISION: frozenset(
            {"collide", "collision", "crash", "bump", "hit", "run into", "each other", "too close"}
        ),
    },
    shape_pairs={HazardClass.BLUE_HAZARD: (frozenset({"blue"}), frozenset({"circle", "circular", "round"}))},
    permissive=frozenset({"safe", "safely", "fine", "okay", "ok", "free", "can", "handle", "shoes", "boots", "clear on", "wont hurt"}),
    prohibitive=frozenset(
        {
            "not", "no", "cannot", "cant", "never", "avoid", "dangerous", "damage", "hazardous", "danger", "dont",
            "clear of", "stay out", "off limits", "no go", "away from",
        }
    ),
    licensable=frozenset({HazardClass.LAVA, HazardClass.WATER, HazardClass.GRASS}),
)

_SENTENCE_SPLIT = re.compile(r"[.!?;]")
_CLAUSE_SPLIT = re.compile(r"[,:–—]|\bbut\b|\beven if\b|\bthough\b", re.IGNORECASE)


def _has(padded: str, term: str) -> bool:
    return f" {term} " in padded


def _padded(tokens: list[str]) -> str:
    return " " + " ".join(tokens) + " "


def _clause_classes(tokens: list[str], lexicon: Lexicon) -> set[HazardClass]:
    padded = _padded(tokens)
    found = {cls for cls, terms in lexicon.terms.items() if any(_has(padded, t) for t in terms)}
    permissive = any(_has(padded, t) for t in lexicon.permissive)
    prohibitive = any(_has(padded, t) for t in lexicon.prohibitive)
    if permissive and not prohibitive:
        found -= set(lexicon.licensable)
    return found


def _sentence_classes(sentence: str, lexicon: Lexicon) -> set[HazardClass]:
    # Shape pairs span comma-separated adjectives ("blue, round"), so they are
    # matched per sentence; plain terms and licensing are matched per clause.
    padded = _padded(tokenize(sentence))
    found: set[HazardClass] = set()
    for cls, (left, right) in lexicon.shape_pairs.items():
        if any(_has(padded, t) for t in left) and any(_has(padded, t) for t in right):
            found.add(cls)
    if lexicon.bare_blue is not None and _has(padded, "blue") and HazardClass.BLUE_HAZARD not in found:
        found.add(lexicon.bare_blue)
    for clause in _CLAUSE_SPLIT.split(sentence):
        tokens = tokenize(clause)
        if tokens:
            found |= _clause_classes(tokens, lexicon)
    return found


def classify_constraint(raw: str, lexicon: Lexicon = DEFAULT_LEXICON) -> frozenset[HazardClass]:
    """Hazard classes a constraint prohibits, by keyword matching."""
    found: set[HazardClass] = set()
    for sentence in _SENTENCE_SPLIT.split(raw):
        found |= _sentence_classes(sentence, lexicon)
    if raw.strip() and not found:
        logger.warning("no hazard class matched constraint %r", raw)
    return frozenset(found)


def canonical_condensed(classes: Iterable[HazardClass]) -> str:
    return "avoid: " + ", ".join(c.value for c in sorted_classes(classes))


# ---------------------------------------------------------------------------
# Corpora
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusEntry:
    raw: str
    hazard_classes: frozenset[HazardClass]


@dataclass(frozen=True)
class ConstraintCorpus:
    entries: tuple[CorpusEntry, ...]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.entries)

    def class_counts(self) -> dict[str, int]:
        counts = {c.value: 0 for c in HazardClass}
        for e in self.entries:
            for c in e.hazard_classes:
                counts[c.value] += 1
        return counts

    def unclassified(self) -> list[str]:
        return [e.raw for e in self.entries if not e.hazard_classes]


SPLITS = ("finetune", "train", "heldout")

BUILTIN_CORPORA = {
    "grid": "grid_constraints.txt",
    "goal": "goal_constraints.txt",
    "finetune": "finetune_constraints.txt",
    "heldout": "heldout_constraints.txt",
}


def builtin_corpus_path(name: str) -> Path:
    return Path(str(resources.files("lamasafe") / "data" / BUILTIN_CORPORA[name]))


def parse_corpus_text(text: str) -> list[str]:
    stripped = text.strip()
    if stripped.startswith("["):
        lines = [str(s) for s in json.loads(stripped)]
    else:
        lines = [ln for ln in text.splitlines() if not ln.lstrip().startswith("#")]
    return [ln.strip() for ln in lines if ln.strip()]


def load_corpus(path: str | Path, split: str = "train", lexicon: Lexicon = DEFAULT_LEXICON) -> ConstraintCorpus:
    """Read a corpus file (one constraint per line, ``#`` comments, or a JSON array).

    Duplicate lines are kept as separate entries.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    lines = parse_corpus_text(text)
    if not lines:
        raise ValueError(f"corpus {path} is empty")
    entries = tuple(CorpusEntry(raw=ln, hazard_classes=classify_constraint(ln, lexicon)) for ln in lines)
    return ConstraintCorpus(entries=entries, split=split)


def load_builtin(name: str, split: str | None = None) -> ConstraintCorpus:
    if split is None:
        split = name if name in SPLITS else "train"
    return load_corpus(builtin_corpus_path(name), split=split)


_SENTENCE_SPAN = re.compile(r"[^.!?;]+[.!?;]*")


def constraint_family(
    corpus: ConstraintCorpus, classes: Iterable[HazardClass], lexicon: Lexicon = DEFAULT_LEXICON
) -> ConstraintCorpus:
    """Distinct sentences of ``corpus`` whose class set is exactly ``classes``.

    Compound entries ("... cannot swim. Do not collide ...") mix several
    classes; this pulls out the single-purpose sentences, e.g. the
    water-only family of the grid corpus.
    """
    wanted = frozenset(HazardClass(c) for c in classes)
    seen: dict[str, CorpusEntry] = {}
    for entry in corpus.entries:
        for span in _SENTENCE_SPAN.findall(entry.raw):
            sentence = span.strip()
            if sentence and sentence not in seen:
                found = classify_constraint(sentence, lexicon) if tokenize(sentence) else frozenset()
                if found == wanted:
                    seen[sentence] = CorpusEntry(raw=sentence, hazard_classes=found)
    if not seen:
        raise ValueError(f"no sentence in the corpus prohibits exactly {sorted(c.value for c in wanted)}")
    return ConstraintCorpus(entries=tuple(seen.values()), split=corpus.split)


def check_disjoint(a: ConstraintCorpus, b: ConstraintCorpus) -> None:
    overlap = {e.raw for e in a.entries} & {e.raw for e in b.entries}
    if overlap:
        raise ValueError(f"corpus splits overlap on {len(overlap)} entries, e.g. {sorted(overlap)[0]!r}")


# ---------------------------------------------------------------------------
# Triplets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negative: str


def is_valid_triplet(t: Triplet, lexicon: Lexicon = DEFAULT_LEXICON) -> bool:
    a = classify_constraint(t.anchor, lexicon)
    p = classify_constraint(t.positive, lexicon)
    n = classify_constraint(t.negative, lexicon)
    return bool(a & p) and bool(n) and not (a & n)


def sample_triplets(corpus: ConstraintCorpus, count: int = 30, rng_seed: int = 0) -> list[Triplet]:
    """Sample (anchor, positive, negative) texts by hazard-class overlap.

    The positive shares at least one class with the anchor and is a different
    entry; the negative shares none.
    """
    entries = [e for e in corpus.entries if e.hazard_classes]
    classes = set().union(*(e.hazard_classes for e in entries)) if entries else set()
    if len(classes) < 2:
        raise ValueError("triplet sampling needs at least two hazard classes in the corpus")
    usable = []
    for i, e in enumerate(entries):
        pos = [j for j, o in enumerate(entries) if j != i and o.raw != e.raw and e.hazard_classes & o.hazard_classes]
        neg = [j for j, o in enumerate(entries) if not e.hazard_classes & o.hazard_classes]
        if pos and neg:
            usable.append((i, pos, neg))
    if not usable:
        raise ValueError("corpus cannot furnish a valid triplet")
    rng = np.random.default_rng(rng_seed)
    out = []
    for _ in range(count):
        i, pos, neg = usable[int(rng.integers(len(usable)))]
        p = pos[int(rng.integers(len(pos)))]
        n = neg[int(rng.integers(len(neg)))]
        out.append(Triplet(entries[i].raw, entries[p].raw, entries[n].raw))
    return out


# ---------------------------------------------------------------------------
# Environment descriptions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvDescription:
    agent: int
    text: str
    mentioned_entities: tuple[tuple[str, str], ...] = ()


_HAZARD_NAMES = {grid_env.Tile.LAVA: "lava", grid_env.Tile.WATER: "water", grid_env.Tile.GRASS: "grass"}

SAFE_TEXT = "Agent is on a safe tile. No hazards detected."
COLLISION_TEXT = "Agent collided with another agent. Collision detected!"

GRID_TEMPLATE_RE = re.compile(
    r"^(Agent is on a (lava|water|grass) tile\. Hazard detected!"
    r"|Agent is adjacent to a (lava|water|grass) tile\. Hazard nearby!"
    r"|Agent is adjacent to a reward ball\. Collect the ball!"
    r"|Agent is on a safe tile\. No hazards detected\.)"
    r"( Agent collided with another agent\. Collision detected!)?$"
)


def describe_grid(world: grid_env.GridWorld, agent: int) -> EnvDescription:
    """Compact description of one agent's surroundings.

    Picks the first matching template in the order on-hazard, adjacent
    hazard, adjacent own ball, safe. A collision during the last move appends
    a collision sentence.
    """
    x, y = world.agents[agent]
    here = world.tile(x, y)
    mentioned: list[tuple[str, str]] = []
    if here in _HAZARD_NAMES:
        name = _HAZARD_NAMES[here]
        text = f"Agent is on a {name} tile. Hazard detected!"
        mentioned.append((name, "on"))
    else:
        near = {world.tile(x + dx, y + dy) for dx, dy in grid_env.NEIGHBOURS}
        adjacent = [t for t in grid_env.HAZARD_TILES if t in near]
        ball = world.balls[agent]
        if adjacent:
            name = _HAZARD_NAMES[adjacent[0]]
            text = f"Agent is adjacent to a {name} tile. Hazard nearby!"
            mentioned.append((name, "adjacent"))
        elif ball is not None and abs(ball[0] - x) + abs(ball[1] - y) == 1:
            text = "Agent is adjacent to a reward ball. Collect the ball!"
            mentioned.append(("ball", "adjacent"))
        else:
            text = SAFE_TEXT
    if world.collided[agent]:
        text = f"{text} {COLLISION_TEXT}"
        mentioned.append(("agent", "collision"))
    return EnvDescription(agent=agent, text=text, mentioned_entities=tuple(mentioned))


_NUMBER_WORDS = {1: "one", 2: "two", 3: "three"}


def format_distance(d: float) -> str:
    s = f"{round(d, 1):.1f}"
    return s[:-2] if s.endswith(".0") else s


def _join_distances(values: Sequence[str]) -> str:
    parts = [f"{v}m" for v in values]
    if len(parts) == 1:
        return parts[0]
    return ", ".join(parts[:-1]) + " and " + parts[-1]


_RADAR_PHRASES = {
    "hazard": ("A hazard has", "Hazards have"),
    "vase": ("A vase has", "Vases have"),
    "agent": ("Another agent has", "Other agents have"),
}


def describe_goal(world: goal_env.GoalWorld, agent: int, sensing_radius: float = goal_env.SENSING_RADIUS, max_listed: int = 3) -> EnvDescription:
    """Radar-style sentences for the nearest hazards, vases and agents."""
    radar = goal_env.radar_distances(world, agent, sensing_radius)
    sentences = []
    mentioned = []
    for kind, (one, many) in _RADAR_PHRASES.items():
        listed = [format_distance(d) for d in radar[kind][:max_listed]]
        if not listed:
            continue
        subject = one if len(listed) == 1 else many
        sentences.append(f"{subject} been detected within {_join_distances(listed)} of you.")
        mentioned.extend((kind, d) for d in listed)
    text = " ".join(sentences) if sentences else "There is nothing around you."
    return EnvDescription(agent=agent, text=text, mentioned_entities=tuple(mentioned))
