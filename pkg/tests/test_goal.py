import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lamasafe.core import HazardClass, LanguageConstraint
from lamasafe.envs import goal
from lamasafe.envs.goal import DifficultySpec, GoalWorld

BLUE = LanguageConstraint(raw="avoid blue circles", hazard_classes=frozenset({HazardClass.BLUE_HAZARD}))
COLLIDE = LanguageConstraint(raw="do not collide", hazard_classes=frozenset({HazardClass.COLLISION}))
VASE = LanguageConstraint(raw="do not touch vases", hazard_classes=frozenset({HazardClass.VASE}))


def world(agents, goals=None, hazards=(), vases=(), **kw):
    goals = goals if goals is not None else [[1.9, 1.9]] * len(agents)
    return GoalWorld(agents=agents, goals=goals, hazards=list(hazards), vases=list(vases), **kw)


@pytest.mark.parametrize("level,hazards", [("easy", 8), ("medium", 16), ("hard", 24)])
def test_difficulty_counts(level, hazards):
    w = goal.reset(DifficultySpec.from_name(level), 2, seed=1)
    assert len(w.hazards) == hazards and len(w.vases) == 5 and w.n_agents == 2
    assert w.max_steps == 1000 and w.half_extent == 2.0


def test_reset_deterministic_and_non_overlapping():
    a = goal.reset(DifficultySpec.from_name("hard"), 2, seed=9)
    b = goal.reset(DifficultySpec.from_name("hard"), 2, seed=9)
    assert a.to_json() == b.to_json()
    pts = np.vstack([a.hazards, a.agents])
    radii = [a.hazard_radius] * len(a.hazards) + [a.agent_radius] * a.n_agents
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            assert np.linalg.norm(pts[i] - pts[j]) >= radii[i] + radii[j]


def test_reset_overrides_and_infeasible():
    w = goal.reset(DifficultySpec.from_name("easy", hazards=0, vases=0), 1, seed=0)
    assert len(w.hazards) == 0 and len(w.vases) == 0
    with pytest.raises(goal.PlacementError):
        goal.reset(DifficultySpec.from_name("easy", hazards=400), 2, seed=0, max_retries=2)


def test_zero_velocity_is_still():
    w = world([[0.0, 0.0]], goals=[[1.0, 0.0]])
    out, nxt = goal.step(w, [[0.0, 0.0]])
    assert np.array_equal(nxt.agents, w.agents) and out.team_reward == 0.0


def test_shaping_and_goal_bonus():
    w = world([[0.0, 0.0]], goals=[[0.35, 0.0]])
    out, nxt = goal.step(w, [[0.1, 0.0]])
    assert out.info["reached"] == (0,)
    assert out.team_reward == pytest.approx(0.1 + 1.0)
    assert np.linalg.norm(nxt.goals[0] - w.goals[0]) > 0
    w2 = world([[0.0, 0.0]], goals=[[1.0, 0.0]])
    out, _ = goal.step(w2, [[0.05, 0.0]])
    assert out.team_reward == pytest.approx(0.05) and out.info["reached"] == ()


def test_velocity_clamped_and_plane_bounds():
    w = world([[1.95, 0.0]], goals=[[-1.0, 0.0]])
    _, nxt = goal.step(w, [[5.0, 0.0]])
    assert nxt.agents[0, 0] <= 2.0 and nxt.agents[0, 0] >= 1.95
    w = world([[0.0, 0.0]], goals=[[-1.0, 0.0]])
    _, nxt = goal.step(w, [[5.0, -5.0]])
    assert np.allclose(nxt.agents[0], [0.1, -0.1])
    with pytest.raises(ValueError):
        goal.step(w, [[np.nan, 0.0]])


def test_vase_blocks_motion():
    w = world([[0.0, 0.0]], goals=[[-1.5, -1.5]], vases=[[0.35, 0.0]])
    _, nxt = goal.step(w, [[0.1, 0.0]])
    gap = 0.35 - 0.1 - nxt.agents[0, 0]
    assert gap >= 0.2 - 1e-6


def test_episode_cap():
    w = world([[0.0, 0.0]], goals=[[1.5, 1.5]], max_steps=1000)
    n = 0
    while not w.done:
        _, w = goal.step(w, [[0.0, 0.0]])
        n += 1
    assert n == 1000
    with pytest.raises(RuntimeError):
        goal.step(w, [[0.0, 0.0]])


def test_hazard_cost_strict_threshold():
    w = world([[0.0, 0.0]], hazards=[[1.2, 0.0]])
    assert goal.ground_truth_cost_goal(w, BLUE) == (0.0,)
    w = world([[0.0, 0.0]], hazards=[[1.19, 0.0]])
    assert goal.ground_truth_cost_goal(w, BLUE) == (1.0,)
    assert goal.ground_truth_cost_goal(w, COLLIDE) == (0.0,)


def test_collision_cost_accumulates():
    w = world([[0.0, 0.0], [0.5, 0.0]])
    totals = np.zeros(2)
    for _ in range(4):
        out, w = goal.step(w, [[0.0, 0.0], [0.0, 0.0]], COLLIDE)
        totals += out.cost_truth
    assert totals.tolist() == [4.0, 4.0]


def test_lone_agent_costs_nothing():
    w = world([[-1.8, -1.8]], hazards=[[1.5, 1.5]], vases=[[1.0, -1.0]])
    for c in (BLUE, COLLIDE, VASE):
        assert goal.ground_truth_cost_goal(w, c) == (0.0,)


@settings(deadline=None, max_examples=50)
@given(st.floats(0.0, 1.9), st.floats(0.01, 0.5))
def test_hazard_cost_monotone_in_proximity(d, closer):
    far = world([[0.0, 0.0]], hazards=[[d, 0.0]])
    near = world([[0.0, 0.0]], hazards=[[max(0.0, d - closer), 0.0]])
    assert goal.ground_truth_cost_goal(near, BLUE)[0] >= goal.ground_truth_cost_goal(far, BLUE)[0]


def test_radar_examples():
    r = goal.radar_distances(world([[0.0, 0.0]], goals=[[10.0, 10.0]], half_extent=20.0), 0)
    assert r["hazard"] == [] and r["vase"] == [] and r["agent"] == [] and r["goal"] == []
    w = world([[0.0, 0.0]], hazards=[[3.0, 0.0], [0.0, 2.5], [-1.0, 0.0]], half_extent=4.0)
    assert goal.radar_distances(w, 0)["hazard"] == [1.0, 2.5, 3.0]


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 10_000))
def test_radar_matches_pairwise_scan(seed):
    w = goal.reset(DifficultySpec.from_name("hard"), 3, seed=seed)
    for i in range(w.n_agents):
        p = w.agents[i]
        expected = sorted(float(np.hypot(*(h - p))) for h in w.hazards)
        expected = [d for d in expected if d <= goal.SENSING_RADIUS]
        assert goal.radar_distances(w, i)["hazard"] == pytest.approx(expected, abs=1e-12)
        others = sorted(float(np.hypot(*(w.agents[j] - p))) for j in range(w.n_agents) if j != i)
        assert goal.radar_distances(w, i)["agent"] == pytest.approx(others, abs=1e-12)


def test_feature_layout():
    assert goal.FEATURE_LENGTH == 23
    w = world([[0.5, 0.5]], goals=[[1.0, 0.0]])
    f = goal.numeric_features_goal(w, 0)
    assert f.shape == (23,) and (f[4:12] == 0).all()


def test_features_translation_invariant_offsets():
    w = goal.reset(DifficultySpec.from_name("easy"), 2, seed=3)
    shift = np.array([0.05, -0.05])
    moved = GoalWorld(
        agents=w.agents + shift, goals=w.goals + shift, hazards=w.hazards + shift, vases=w.vases + shift
    )
    a, b = goal.numeric_features_goal(w, 0), goal.numeric_features_goal(moved, 0)
    assert np.allclose(a[2:22], b[2:22], atol=1e-12)


@settings(deadline=None, max_examples=10)
@given(st.integers(0, 10_000))
def test_random_walk_stays_on_plane_and_goals_clear(seed):
    rng = np.random.default_rng(seed)
    w = goal.reset(DifficultySpec.from_name("medium"), 2, seed=seed)
    for _ in range(200):
        out, w = goal.step(w, rng.uniform(-0.1, 0.1, size=(2, 2)))
        assert np.all(np.abs(w.agents) <= 2.0 + 1e-12)
        if out.info["reached"]:
            for i in out.info["reached"]:
                g = w.goals[i]
                assert np.all(np.linalg.norm(w.hazards - g, axis=1) >= w.hazard_radius + goal.GOAL_RADIUS)


def test_step_deterministic_and_json_round_trip():
    w = goal.reset(DifficultySpec.from_name("easy"), 2, seed=4)
    acts = np.random.default_rng(0).uniform(-0.1, 0.1, size=(50, 2, 2))

    def run(start):
        trace = []
        for a in acts:
            out, start = goal.step(start, a, BLUE)
            trace.append((start.agents.tobytes(), out.team_reward, out.cost_truth))
        return trace

    assert run(w) == run(GoalWorld.from_json(w.to_json()))
    assert set(json.loads(w.to_json())) >= {"agents", "goals", "hazards", "vases", "max_steps"}
