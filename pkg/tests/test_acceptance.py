"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""

import math
import subprocess
import sys
import time
from collections import deque

import numpy as np

from conftest import ACCEPTANCE_LINES
from lamasafe.audit import oracle_audit
from lamasafe.costlm import CostPredictor, RuleOracle, predict_cost
from lamasafe.embed import EncoderState, encode, finetune
from lamasafe.envs import goal as goal_env
from lamasafe.envs import grid as grid_env
from lamasafe.envs.grid import Tile
from lamasafe.marl import trainer
from lamasafe.marl.config import EnvConfig, TrainConfig
from lamasafe.marl.gae import compute_gae
from lamasafe.marl.losses import LagrangeState, update_lambda
from lamasafe.nn import gradcheck_suite
from lamasafe.text import constraint_family, load_builtin, sample_triplets
from lamasafe.core import HazardClass


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_1_gradient_correctness():
    t0 = time.perf_counter()
    errors = gradcheck_suite(100, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(errors)
    verdict(1, len(errors) >= 100 and worst < 1e-4 and elapsed < 30, f"{len(errors)} nets, max rel err {worst:.2e}, {elapsed:.1f}s")


def brute_force_gae(r, v, gamma, lam, dones):
    T = len(r)
    deltas = [r[k] + gamma * v[k + 1] * (1.0 - dones[k]) - v[k] for k in range(T)]
    adv = np.zeros(T)
    for t in range(T):
        total, weight = 0.0, 1.0
        for k in range(t, T):
            total += weight * deltas[k]
            if dones[k]:
                break
            weight *= gamma * lam
        adv[t] = total
    return adv


def test_2_gae_oracle():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        T = int(rng.integers(1, 65))
        gamma, lam = float(rng.uniform(0, 0.999)), float(rng.uniform(0, 1))
        r, v = rng.standard_normal(T), rng.standard_normal(T + 1)
        dones = (rng.random(T) < 0.1).astype(float)
        adv, _ = compute_gae(r, v, gamma, lam, dones)
        worst = max(worst, float(np.abs(adv - brute_force_gae(r, v, gamma, lam, dones)).max()))
    elapsed = time.perf_counter() - t0
    verdict(2, worst <= 1e-10 and elapsed < 10, f"1000 sequences, max abs diff {worst:.1e}, {elapsed:.1f}s")


def test_3_cost_oracle_agreement():
    corpus = load_builtin("grid")
    t0 = time.perf_counter()
    report = oracle_audit(corpus, RuleOracle())
    elapsed = time.perf_counter() - t0
    verdict(
        3,
        report.agreement == 1.0 and elapsed < 60 and report.constraints == len(corpus),
        f"{report.constraints} constraints x {report.states} states, {report.total} checks, "
        f"agreement {report.agreement:.4f}, {elapsed:.1f}s",
    )


def test_4_predicted_cost_algebra():
    rng = np.random.default_rng(4)
    bad = 0
    for _ in range(10_000):
        a, b = rng.standard_normal(64), rng.standard_normal(64)
        a /= np.linalg.norm(a)
        b /= np.linalg.norm(b)
        flag = int(rng.integers(0, 2))
        c = predict_cost(a, b, flag)
        expected = flag * max(0.0, float(np.dot(a, b)))
        oracle = flag * max(0.0, math.fsum(x * y for x, y in zip(a, b)))
        ok = c.value == expected and 0.0 <= c.value <= 1.0 and abs(c.value - oracle) < 1e-15
        bad += not ok
    verdict(4, bad == 0, f"10000 pairs, {bad} mismatches")


def mean_separation(state, corpus):
    entries = corpus.entries
    emb = {e.raw: encode(state, e.raw) for e in entries}
    same, cross = [], []
    for i, a in enumerate(entries):
        for b in entries[i + 1 :]:
            if a.raw == b.raw:
                continue
            cos = float(emb[a.raw] @ emb[b.raw])
            (same if a.hazard_classes & b.hazard_classes else cross).append(cos)
    return float(np.mean(same)) - float(np.mean(cross))


def test_5_triplet_finetuning():
    t0 = time.perf_counter()
    fresh = EncoderState.fresh(seed=0)
    triplets = sample_triplets(load_builtin("finetune"), 30, rng_seed=0)
    tuned = finetune(fresh, triplets, rounds=95)
    heldout = load_builtin("heldout")
    before, after = mean_separation(fresh, heldout), mean_separation(tuned, heldout)
    elapsed = time.perf_counter() - t0
    loss = tuned.loss_history
    ok = after - before >= 0.05 and loss[-1] <= loss[0] and len(loss) == 95 and elapsed < 60
    verdict(5, ok, f"held-out separation {before:.3f} -> {after:.3f} (+{after - before:.3f}), "
               f"loss {loss[0]:.3f} -> {loss[-1]:.3f}, {elapsed:.1f}s")


def trajectory(algorithm, **extra):
    cfg = TrainConfig(algorithm=algorithm, total_steps=1000, steps_per_update=50, n_envs=2, batch_size=64,
                      ppo_epochs=2, eval_interval=1000, eval_episodes=2, hidden=(16, 16), **extra)
    env = EnvConfig(size=6, hazard_count=6, n_agents=2)
    snaps = []
    predictor = CostPredictor(EncoderState.fresh(dim=16, seed=0), RuleOracle())
    trainer.train(cfg, env, load_builtin("grid"), predictor, seed=6, on_update=lambda k, nets: snaps.append(trainer.flat_params(nets).copy()))
    return snaps


def test_6_reduction_to_mappo():
    small = trajectory("SMALL-MAPPO", cost_source="zero", lambda_init=0.0)
    base = trajectory("MAPPO")
    identical = len(small) == len(base) == 10 and all(np.array_equal(a, b) for a, b in zip(small, base))
    moved = not np.array_equal(base[0], base[-1])
    verdict(6, identical and moved, f"{len(base)} updates over 1000 steps, bit-identical={identical}")


def test_7_lagrange_dynamics():
    lr, budget, j_c = 1e-3, 2.0, 7.5
    state = LagrangeState(lam=0.78, lr=lr, budget=budget)
    exact = True
    for _ in range(500):
        nxt = update_lambda(state, j_c)
        exact &= nxt.lam == state.lam + lr * (j_c - budget) and nxt.lam > state.lam
        state = nxt
    low = LagrangeState(lam=0.003, lr=lr, budget=budget)
    path = []
    for _ in range(5):
        low = update_lambda(low, 0.0)
        path.append(low.lam)
    clamped = path[0] == 0.003 - lr * budget and path[1:] == [0.0] * 4
    verdict(7, exact and clamped, f"500 ascent steps exact={exact}, projection at 0 holds={clamped}")


def unique_corridor(world, agent):
    """Count lava-free simple paths from the agent to its ball, capped at 2."""
    start, goal = world.agents[agent], world.balls[agent]
    count = 0
    stack = [(start, frozenset([start]))]
    while stack and count < 2:
        (x, y), seen = stack.pop()
        if (x, y) == goal:
            count += 1
            continue
        for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            if (nx, ny) not in seen and world.tile(nx, ny) not in (Tile.WALL, Tile.LAVA):
                stack.append(((nx, ny), seen | {(nx, ny)}))
    return count == 1


def bfs_reachable(world, agent):
    start, goal = world.agents[agent], world.balls[agent]
    seen, queue = {start}, deque([start])
    while queue:
        x, y = queue.popleft()
        for nxt in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            if nxt not in seen and world.tile(*nxt) not in (Tile.WALL, Tile.LAVA):
                seen.add(nxt)
                queue.append(nxt)
    return goal in seen


def test_9_environment_conformance():
    checks = {}
    boards = [grid_env.generate_onepath_layout(1, seed=s) for s in range(10)]
    checks["onepath 8x8"] = all(b.tiles[1:-1, 1:-1].shape == (8, 8) for b in boards)
    checks["unique corridor"] = all(bfs_reachable(b, 0) and unique_corridor(b, 0) for b in boards)
    w = grid_env.generate_random_layout(6, 0, 1, seed=0)
    n = 0
    while not w.done:
        _, w = grid_env.step(w, [grid_env.Action.STAY])
        n += 1
    checks["grid cap 300"] = n == 300 == grid_env.MAX_STEPS
    g = goal_env.reset(goal_env.DifficultySpec.from_name("easy"), 1, seed=0)
    n = 0
    while not g.done:
        _, g = goal_env.step(g, [[0.0, 0.0]])
        n += 1
    checks["goal cap 1000"] = n == 1000 == goal_env.MAX_STEPS
    counts = {}
    for level in ("easy", "medium", "hard"):
        world = goal_env.reset(goal_env.DifficultySpec.from_name(level), 2, seed=1)
        counts[level] = (len(world.hazards), len(world.vases))
    checks["8/16/24 hazards, 5 vases"] = counts == {"easy": (8, 5), "medium": (16, 5), "hard": (24, 5)}
    failed = [k for k, ok in checks.items() if not ok]
    verdict(9, not failed, "all constants match" if not failed else f"failed: {failed}")


def test_10_cli_determinism(tmp_path):
    args = [
        "train", "--seed", "3", "--override", "train.total_steps=400", "--override", "train.steps_per_update=50",
        "--override", "train.n_envs=2", "--override", "train.batch_size=64", "--override", "train.eval_interval=200",
        "--override", "train.eval_episodes=3", "--override", "train.hidden=[16]", "--override", "env.size=6",
        "--override", "env.hazard_count=6", "--override", "rounds=5", "--provider", "rule",
    ]
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        proc = subprocess.run([sys.executable, "-m", "lamasafe.cli", *args, "--out", str(out)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outputs.append((out / "seed_3" / "metrics.jsonl").read_bytes())
    same = outputs[0] == outputs[1] and len(outputs[0].splitlines()) == 2
    verdict(10, same, f"two separate processes, metrics.jsonl byte-identical={same}")


# Defined last so it runs last: six training runs of 200k env steps each.
def test_8_end_to_end_trend():
    corpus = constraint_family(load_builtin("grid"), [HazardClass.WATER])
    encoder = finetune(EncoderState.fresh(seed=0), sample_triplets(load_builtin("finetune"), 30, rng_seed=0), rounds=95)
    env = EnvConfig(size=6, hazard_count=12, n_agents=2)
    finals, durations = {}, []
    for algorithm in ("SMALL-MAPPO", "MAPPO"):
        rewards, costs = [], []
        for seed in (0, 1, 2):
            cfg = TrainConfig(algorithm=algorithm, total_steps=200_000, eval_interval=200_000, eval_episodes=10,
                              actor_lr=1e-3, n_envs=4)
            t0 = time.perf_counter()
            res = trainer.train(cfg, env, corpus, CostPredictor(encoder, RuleOracle()), seed=seed)
            durations.append(time.perf_counter() - t0)
            rewards.append(res.metrics[-1]["eval_reward_mean"])
            costs.append(res.metrics[-1]["eval_cost_mean"])
        finals[algorithm] = (float(np.mean(rewards)), float(np.mean(costs)))
    (r_s, c_s), (r_m, c_m) = finals["SMALL-MAPPO"], finals["MAPPO"]
    cost_ratio = c_s / c_m if c_m > 0 else (0.0 if c_s == 0 else math.inf)
    reward_ratio = r_s / r_m if r_m > 0 else math.nan
    ok = c_s <= 0.25 * c_m and r_s >= 0.5 * r_m and max(durations) <= 1800
    verdict(8, ok, f"SMALL-MAPPO reward {r_s:.2f} cost {c_s:.2f}; MAPPO reward {r_m:.2f} cost {c_m:.2f}; "
                   f"cost ratio {cost_ratio:.1%}, reward ratio {reward_ratio:.1%}, slowest run {max(durations):.0f}s")
