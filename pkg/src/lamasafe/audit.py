"""Exhaustive agreement check between oracle flags and ground-truth costs."""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from lamasafe.core import LanguageConstraint
from lamasafe.costlm import RuleOracle
from lamasafe.envs import grid as grid_env
from lamasafe.text import ConstraintCorpus, describe_grid


def _state_key(world: grid_env.GridWorld) -> tuple:
    return (world.tiles.tobytes(), world.agents, world.balls, world.collided, world.done)


def reachable_states(start: grid_env.GridWorld, limit: int = 200_000) -> list[grid_env.GridWorld]:
    """Breadth-first closure of ``start`` under every joint action.

    The timestep is ignored when deduplicating; terminal states are kept but
    not expanded.
    """
    world = grid_env.GridWorld(
        tiles=start.tiles, agents=start.agents, balls=start.balls, collided=start.collided, max_steps=10**9
    )
    joint = list(itertools.product(range(grid_env.N_ACTIONS), repeat=world.n_agents))
    seen = {_state_key(world): world}
    queue = deque([world])
    while queue:
        w = queue.popleft()
        if w.done:
            continue
        for actions in joint:
            _, nxt = grid_env.step(w, actions)
            key = _state_key(nxt)
            if key not in seen:
                if len(seen) >= limit:
                    raise RuntimeError(f"state space exceeds {limit} states")
                seen[key] = nxt
                queue.append(nxt)
    return list(seen.values())


def audit_boards(size: int = 5, n_agents: int = 2) -> list[grid_env.GridWorld]:
    """Small boards that put every hazard kind next to the agents' routes."""
    tiles = np.full((size, size), grid_env.Tile.WALL, dtype=np.int8)
    tiles[1:-1, 1:-1] = grid_env.Tile.EMPTY
    interior = [(x, y) for y in range(1, size - 1) for x in range(1, size - 1)]
    hazards = (grid_env.Tile.LAVA, grid_env.Tile.WATER, grid_env.Tile.GRASS)
    for (x, y), kind in zip(interior[1:], hazards):
        tiles[y, x] = kind
    starts = tuple(interior[: 1]) + tuple(interior[-1 - i] for i in range(n_agents - 1))
    balls_pool = [c for c in interior if c not in starts and tiles[c[1], c[0]] == grid_env.Tile.EMPTY]
    balls = tuple(balls_pool[-n_agents:])
    for x, y in balls:
        tiles[y, x] = grid_env.Tile.BALL
    boards = [grid_env.GridWorld(tiles=tiles, agents=starts, balls=balls)]
    boards.append(grid_env.generate_random_layout(size, 3, n_agents, seed=0))
    return boards


@dataclass
class AuditReport:
    states: int = 0
    constraints: int = 0
    # keys: (flag, truth) in {0,1}^2
    matrix: dict[tuple[int, int], int] = field(default_factory=lambda: {(0, 0): 0, (0, 1): 0, (1, 0): 0, (1, 1): 0})
    mismatches: list[dict] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.matrix.values())

    @property
    def agreement(self) -> float:
        return 1.0 if self.total == 0 else (self.matrix[(0, 0)] + self.matrix[(1, 1)]) / self.total

    def to_dict(self) -> dict:
        return {
            "states": self.states,
            "constraints": self.constraints,
            "checks": self.total,
            "agreement": self.agreement,
            "matrix": {f"flag={f},truth={t}": n for (f, t), n in self.matrix.items()},
            "mismatches": self.mismatches[:20],
        }


def oracle_audit(
    constraints: Sequence[LanguageConstraint] | ConstraintCorpus,
    oracle: RuleOracle | None = None,
    boards: Iterable[grid_env.GridWorld] | None = None,
) -> AuditReport:
    """Compare oracle flags with ground truth over every reachable state.

    Ground truth uses each constraint's recorded hazard classes; the oracle
    only sees its own condensation of the raw text, so a faulty lexicon shows
    up as disagreement.
    """
    oracle = oracle or RuleOracle()
    if isinstance(constraints, ConstraintCorpus):
        constraints = [LanguageConstraint(raw=e.raw, hazard_classes=e.hazard_classes) for e in constraints.entries]
    report = AuditReport(constraints=len(constraints))
    if not constraints:
        return report
    prepared = [c.with_condensed(oracle.condense(c.raw)) for c in constraints]
    for world in boards if boards is not None else audit_boards():
        states = reachable_states(world)
        report.states += len(states)
        for state in states:
            descriptions = [describe_grid(state, i) for i in range(state.n_agents)]
            for c in prepared:
                truth = grid_env.ground_truth_cost_grid(state, c)
                for i, d in enumerate(descriptions):
                    flag = int(oracle.violates(d, c))
                    t = int(truth[i] > 0)
                    report.matrix[(flag, t)] += 1
                    if flag != t and len(report.mismatches) < 100:
                        report.mismatches.append(
                            {"constraint": c.raw, "condensed": c.condensed, "agent": i, "description": d.text, "flag": flag, "truth": t}
                        )
    return report
