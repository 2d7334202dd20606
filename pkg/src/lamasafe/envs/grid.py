"""LaMaSafe-Grid: a multi-agent grid world with lava, water and grass.

Each agent hunts for its own ball. Picking it up pays a team reward that
decays linearly over the episode. Hazard tiles are walkable; stepping on the
one a constraint forbids, or sharing a cell with another agent, is what
incurs ground-truth cost.

Coordinates are ``(x, y)`` with ``tiles[y, x]``; ``y`` grows downwards.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from lamasafe.core import HazardClass, LanguageConstraint, StepOutcome

MAX_STEPS = 300
BALL_REWARD = 3.0
DEFAULT_SIZE = 10
ONEPATH_INTERIOR = 8
WINDOW = 5


class Tile(enum.IntEnum):
    EMPTY = 0
    WALL = 1
    LAVA = 2
    WATER = 3
    GRASS = 4
    BALL = 5


HAZARD_TILES = (Tile.LAVA, Tile.WATER, Tile.GRASS)
TERRAIN_CLASS = {Tile.LAVA: HazardClass.LAVA, Tile.WATER: HazardClass.WATER, Tile.GRASS: HazardClass.GRASS}
N_TILE_KINDS = len(Tile)


class Action(enum.IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    STAY = 4


N_ACTIONS = len(Action)
DELTAS = {
    Action.UP: (0, -1),
    Action.DOWN: (0, 1),
    Action.LEFT: (-1, 0),
    Action.RIGHT: (1, 0),
    Action.STAY: (0, 0),
}
NEIGHBOURS = ((0, -1), (0, 1), (-1, 0), (1, 0))

FEATURE_LENGTH = WINDOW * WINDOW * N_TILE_KINDS + 2 + 2 + 1


class LayoutError(RuntimeError):
    pass


@dataclass(frozen=True)
class GridWorld:
    """Immutable grid state; :func:`step` returns a fresh instance."""

    tiles: np.ndarray
    agents: tuple[tuple[int, int], ...]
    balls: tuple[tuple[int, int] | None, ...]
    timestep: int = 0
    max_steps: int = MAX_STEPS
    collided: tuple[bool, ...] = ()
    done: bool = False

    def __post_init__(self):
        tiles = np.array(self.tiles, dtype=np.int8)
        tiles.setflags(write=False)
        object.__setattr__(self, "tiles", tiles)
        if not self.collided:
            object.__setattr__(self, "collided", (False,) * len(self.agents))
        if len(self.balls) != len(self.agents):
            raise ValueError("exactly one ball per agent is required")
        for x, y in self.agents:
            if not (0 <= x < self.width and 0 <= y < self.height) or tiles[y, x] == Tile.WALL:
                raise ValueError(f"agent position {(x, y)} is out of bounds or on a wall")
        if not 0 <= self.timestep <= self.max_steps:
            raise ValueError("timestep exceeds max_steps")

    @property
    def width(self) -> int:
        return int(self.tiles.shape[1])

    @property
    def height(self) -> int:
        return int(self.tiles.shape[0])

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def balls_collected(self) -> tuple[bool, ...]:
        return tuple(b is None for b in self.balls)

    def tile(self, x: int, y: int) -> Tile:
        if not (0 <= x < self.width and 0 <= y < self.height):
            return Tile.WALL
        return Tile(int(self.tiles[y, x]))

    def key(self) -> tuple:
        """Hashable identity of the state, used for state-space enumeration."""
        return (self.tiles.tobytes(), self.agents, self.balls, self.timestep, self.collided, self.done)

    def to_json(self) -> str:
        return json.dumps(
            {
                "width": self.width,
                "height": self.height,
                "tiles": [int(v) for v in self.tiles.ravel()],
                "agents": [[x, y] for x, y in self.agents],
                "balls": [[b[0], b[1], i] for i, b in enumerate(self.balls) if b is not None],
                "max_steps": self.max_steps,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> GridWorld:
        data = json.loads(text)
        tiles = np.asarray(data["tiles"], dtype=np.int8).reshape(data["height"], data["width"])
        balls: list[tuple[int, int] | None] = [None] * len(data["agents"])
        for x, y, owner in data["balls"]:
            balls[owner] = (x, y)
        return cls(
            tiles=tiles,
            agents=tuple((int(x), int(y)) for x, y in data["agents"]),
            balls=tuple(balls),
            max_steps=int(data.get("max_steps", MAX_STEPS)),
        )


def _empty_board(width: int, height: int) -> np.ndarray:
    tiles = np.full((height, width), Tile.EMPTY, dtype=np.int8)
    tiles[0, :] = tiles[-1, :] = Tile.WALL
    tiles[:, 0] = tiles[:, -1] = Tile.WALL
    return tiles


def _reachable(tiles: np.ndarray, start: tuple[int, int], goal: tuple[int, int]) -> bool:
    seen = {start}
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        if (x, y) == goal:
            return True
        for dx, dy in NEIGHBOURS:
            nxt = (x + dx, y + dy)
            if nxt not in seen and tiles[nxt[1], nxt[0]] != Tile.WALL:
                seen.add(nxt)
                queue.append(nxt)
    return False


def generate_random_layout(
    size: int = DEFAULT_SIZE,
    hazard_count: int = 20,
    n_agents: int = 2,
    seed: int | np.random.Generator = 0,
    max_steps: int = MAX_STEPS,
    max_retries: int = 100,
) -> GridWorld:
    """Scatter hazards, starts and balls over a walled ``size x size`` board.

    Hazard kinds are dealt round-robin over lava, water and grass before the
    cells are shuffled, so the split is as even as the count allows.
    """
    if size < 5:
        raise ValueError("board size must be at least 5")
    if n_agents < 1 or hazard_count < 0:
        raise ValueError("need at least one agent and a non-negative hazard count")
    interior = [(x, y) for y in range(1, size - 1) for x in range(1, size - 1)]
    if hazard_count + 2 * n_agents > len(interior):
        raise ValueError(
            f"{hazard_count} hazards and {n_agents} agents do not fit in {len(interior)} interior cells"
        )
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    kinds = [HAZARD_TILES[i % 3] for i in range(hazard_count)]
    for _ in range(max_retries):
        order = rng.permutation(len(interior))
        cells = [interior[i] for i in order[: hazard_count + 2 * n_agents]]
        tiles = _empty_board(size, size)
        for (x, y), kind in zip(cells[:hazard_count], kinds):
            tiles[y, x] = kind
        starts = cells[hazard_count : hazard_count + n_agents]
        balls = cells[hazard_count + n_agents :]
        for x, y in balls:
            tiles[y, x] = Tile.BALL
        if all(_reachable(tiles, s, b) for s, b in zip(starts, balls)):
            return GridWorld(tiles=tiles, agents=tuple(starts), balls=tuple(balls), max_steps=max_steps)
    raise LayoutError(f"no feasible random layout after {max_retries} attempts")


def _count_turns(path: Sequence[tuple[int, int]]) -> int:
    turns = 0
    for a, b, c in zip(path, path[1:], path[2:]):
        if (b[0] - a[0], b[1] - a[1]) != (c[0] - b[0], c[1] - b[1]):
            turns += 1
    return turns


def _grow_corridor(rng, lo: int, hi: int, blocked: set, length: int) -> list[tuple[int, int]] | None:
    """Random self-avoiding walk whose cells only touch their path neighbours.

    The no-touch rule makes the corridor an induced path, so exactly one simple
    lava-free route joins its two ends.
    """
    free = [(x, y) for y in range(lo, hi) for x in range(lo, hi) if (x, y) not in blocked]
    if not free:
        return None
    path = [free[int(rng.integers(len(free)))]]
    on_path = {path[0]}
    while len(path) < length:
        tip = path[-1]
        options = []
        for dx, dy in NEIGHBOURS:
            cand = (tip[0] + dx, tip[1] + dy)
            if not (lo <= cand[0] < hi and lo <= cand[1] < hi):
                continue
            if cand in on_path or cand in blocked:
                continue
            touching = [
                (cand[0] + ex, cand[1] + ey)
                for ex, ey in NEIGHBOURS
                if (cand[0] + ex, cand[1] + ey) in on_path
            ]
            if touching != [tip]:
                continue
            options.append(cand)
        if not options:
            return None
        nxt = options[int(rng.integers(len(options)))]
        path.append(nxt)
        on_path.add(nxt)
    return path


def generate_onepath_layout(
    n_agents: int = 1,
    seed: int | np.random.Generator = 0,
    interior: int = ONEPATH_INTERIOR,
    min_turns: int = 3,
    max_steps: int = MAX_STEPS,
    max_retries: int = 2000,
) -> GridWorld:
    """Lava everywhere except one winding corridor per agent.

    Corridors never touch each other, so each agent's start and ball are
    joined by a single lava-free route.
    """
    if n_agents < 1 or n_agents > 2:
        raise ValueError("the 8x8 one-path board supports one or two agents")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    size = interior + 2
    length = 14 if n_agents == 1 else 10
    for _ in range(max_retries):
        blocked: set[tuple[int, int]] = set()
        corridors = []
        for _agent in range(n_agents):
            path = _grow_corridor(rng, 1, size - 1, blocked, length)
            if path is None or _count_turns(path) < min_turns:
                break
            corridors.append(path)
            for x, y in path:
                blocked.add((x, y))
                for dx, dy in NEIGHBOURS:
                    blocked.add((x + dx, y + dy))
        if len(corridors) != n_agents:
            continue
        tiles = _empty_board(size, size)
        tiles[1:-1, 1:-1] = Tile.LAVA
        for path in corridors:
            for x, y in path:
                tiles[y, x] = Tile.EMPTY
        starts = tuple(path[0] for path in corridors)
        balls = tuple(path[-1] for path in corridors)
        for x, y in balls:
            tiles[y, x] = Tile.BALL
        return GridWorld(tiles=tiles, agents=starts, balls=balls, max_steps=max_steps)
    raise LayoutError(f"no one-path layout after {max_retries} attempts")


def reward_decay(t: int, max_steps: int = MAX_STEPS) -> float:
    """Ball reward at timestep ``t``: 3.0 at the start, 0.3 at ``max_steps``."""
    if not 0 <= t <= max_steps:
        raise ValueError(f"timestep {t} outside [0, {max_steps}]")
    return BALL_REWARD * (1.0 - 0.9 * t / max_steps)


def _collisions(old: Sequence[tuple[int, int]], new: Sequence[tuple[int, int]]) -> list[bool]:
    hit = [False] * len(new)
    for i in range(len(new)):
        for j in range(i + 1, len(new)):
            same_cell = new[i] == new[j]
            swapped = new[i] == old[j] and new[j] == old[i] and old[i] != old[j]
            if same_cell or swapped:
                hit[i] = hit[j] = True
    return hit


def step(
    world: GridWorld,
    actions: Sequence[int],
    constraint: LanguageConstraint | None = None,
) -> tuple[StepOutcome, GridWorld]:
    """Advance every agent simultaneously by one cell.

    Moves into walls leave the agent in place. An agent landing on its own
    ball collects it for ``reward_decay`` of the pre-step timestep.
    Ground-truth costs are filled in when ``constraint`` is given.
    """
    if world.done:
        raise RuntimeError("step() called on a terminated grid world")
    if len(actions) != world.n_agents:
        raise ValueError(f"expected {world.n_agents} actions, got {len(actions)}")
    new_pos = []
    for (x, y), a in zip(world.agents, actions):
        dx, dy = DELTAS[Action(int(a))]
        nx, ny = x + dx, y + dy
        if world.tile(nx, ny) == Tile.WALL:
            nx, ny = x, y
        new_pos.append((nx, ny))

    reward = 0.0
    balls = list(world.balls)
    tiles = world.tiles
    collected_now = []
    for i, pos in enumerate(new_pos):
        if balls[i] is not None and balls[i] == pos:
            reward += reward_decay(world.timestep, world.max_steps)
            if tiles is world.tiles:
                tiles = world.tiles.copy()
            tiles[pos[1], pos[0]] = Tile.EMPTY
            balls[i] = None
            collected_now.append(i)

    timestep = world.timestep + 1
    done = all(b is None for b in balls) or timestep >= world.max_steps
    nxt = GridWorld(
        tiles=tiles,
        agents=tuple(new_pos),
        balls=tuple(balls),
        timestep=timestep,
        max_steps=world.max_steps,
        collided=tuple(_collisions(world.agents, new_pos)),
        done=done,
    )
    costs = ground_truth_cost_grid(nxt, constraint) if constraint is not None else (0.0,) * world.n_agents
    outcome = StepOutcome(team_reward=reward, cost_truth=costs, done=done, info={"collected": tuple(collected_now)})
    return outcome, nxt


def ground_truth_cost_grid(world: GridWorld, constraint: LanguageConstraint) -> tuple[float, ...]:
    """Per-agent violation indicator for the current state (evaluation only).

    An agent costs 1 when it collided during the last move (if collisions are
    constrained) or stands on a tile of a constrained terrain kind.
    """
    classes = constraint.hazard_classes
    costs = []
    for i, (x, y) in enumerate(world.agents):
        violated = HazardClass.COLLISION in classes and world.collided[i]
        kind = world.tile(x, y)
        if kind in TERRAIN_CLASS and TERRAIN_CLASS[kind] in classes:
            violated = True
        costs.append(1.0 if violated else 0.0)
    return tuple(costs)


def numeric_features(world: GridWorld, agent: int) -> np.ndarray:
    """Egocentric encoding of length :data:`FEATURE_LENGTH`.

    Layout: one-hot tile kinds of the 5x5 window (off-board cells read as
    walls), normalized own position, unit offset towards the own ball (zero
    once collected), elapsed fraction of the episode.
    """
    x, y = world.agents[agent]
    half = WINDOW // 2
    pad = np.full((world.height + 2 * half, world.width + 2 * half), Tile.WALL, dtype=np.int64)
    pad[half:-half, half:-half] = world.tiles
    window = pad[y : y + WINDOW, x : x + WINDOW]
    onehot = np.zeros((WINDOW * WINDOW, N_TILE_KINDS))
    onehot[np.arange(WINDOW * WINDOW), window.ravel()] = 1.0
    pos = np.array([x / (world.width - 1), y / (world.height - 1)])
    ball = world.balls[agent]
    direction = np.zeros(2)
    if ball is not None:
        offset = np.array([ball[0] - x, ball[1] - y], dtype=np.float64)
        norm = np.linalg.norm(offset)
        if norm > 0:
            direction = offset / norm
    frac = np.array([world.timestep / world.max_steps])
    return np.concatenate([onehot.ravel(), pos, direction, frac])


def corridor_mask(world: GridWorld) -> np.ndarray:
    """Boolean mask of interior cells that are not lava."""
    interior = np.zeros_like(world.tiles, dtype=bool)
    interior[1:-1, 1:-1] = True
    return interior & (world.tiles != Tile.LAVA)


def with_agents(world: GridWorld, agents: Sequence[tuple[int, int]], **changes) -> GridWorld:
    """Copy of ``world`` with agents moved; handy for building test states."""
    return dataclasses.replace(world, agents=tuple(agents), **changes)
