"""Adapters that give both environments one rollout interface."""

from __future__ import annotations

from typing import Any, Sequence

import numpy as np

from lamasafe.core import LanguageConstraint, StepOutcome
from lamasafe.envs import goal as goal_env
from lamasafe.envs import grid as grid_env
from lamasafe.marl.config import EnvConfig
from lamasafe.text import EnvDescription, describe_goal, describe_grid


class GridTask:
    """Discrete five-action control on a grid layout drawn per episode."""

    head_kind = "categorical"
    action_dim = grid_env.N_ACTIONS

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.n_agents = cfg.n_agents
        self.max_steps = cfg.max_steps or grid_env.MAX_STEPS
        # The tile window has no agent channel, so teammate offsets are appended.
        self.obs_dim = grid_env.FEATURE_LENGTH + 2 * (self.n_agents - 1)

    def reset(self, rng: np.random.Generator) -> grid_env.GridWorld:
        if self.cfg.layout == "onepath":
            return grid_env.generate_onepath_layout(self.n_agents, rng, max_steps=self.max_steps)
        return grid_env.generate_random_layout(
            self.cfg.size, self.cfg.hazard_count, self.n_agents, rng, max_steps=self.max_steps
        )

    def observe(self, world: grid_env.GridWorld) -> np.ndarray:
        pos = np.asarray(world.agents, dtype=np.float64)
        scale = max(world.width, world.height) - 1
        rows = []
        for i in range(self.n_agents):
            mates = (np.delete(pos, i, axis=0) - pos[i]) / scale
            rows.append(np.concatenate([grid_env.numeric_features(world, i), mates.ravel()]))
        return np.stack(rows)

    def describe(self, world: grid_env.GridWorld) -> list[EnvDescription]:
        return [describe_grid(world, i) for i in range(self.n_agents)]

    def step(self, world, actions: np.ndarray, constraint: LanguageConstraint) -> tuple[StepOutcome, Any]:
        return grid_env.step(world, [int(a) for a in actions], constraint)

    def cost_truth(self, world, constraint: LanguageConstraint) -> tuple[float, ...]:
        return grid_env.ground_truth_cost_grid(world, constraint)


class GoalTask:
    """Continuous velocity control; policy outputs are scaled by the speed cap."""

    head_kind = "gaussian"
    action_dim = 2
    obs_dim = goal_env.FEATURE_LENGTH
    action_bound = 1.0

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.n_agents = cfg.n_agents
        self.spec = goal_env.DifficultySpec.from_name(cfg.difficulty)
        self.max_steps = cfg.max_steps or goal_env.MAX_STEPS

    def reset(self, rng: np.random.Generator) -> goal_env.GoalWorld:
        return goal_env.reset(self.spec, self.n_agents, int(rng.integers(2**31)), max_steps=self.max_steps)

    def observe(self, world: goal_env.GoalWorld) -> np.ndarray:
        return np.stack([goal_env.numeric_features_goal(world, i) for i in range(self.n_agents)])

    def describe(self, world: goal_env.GoalWorld) -> list[EnvDescription]:
        return [describe_goal(world, i) for i in range(self.n_agents)]

    def step(self, world, actions: np.ndarray, constraint: LanguageConstraint) -> tuple[StepOutcome, Any]:
        vel = np.clip(np.asarray(actions, dtype=np.float64), -1.0, 1.0) * goal_env.V_MAX
        return goal_env.step(world, vel, constraint)

    def cost_truth(self, world, constraint: LanguageConstraint) -> tuple[float, ...]:
        return goal_env.ground_truth_cost_goal(world, constraint)


def make_task(cfg: EnvConfig):
    return GridTask(cfg) if cfg.name == "grid" else GoalTask(cfg)
