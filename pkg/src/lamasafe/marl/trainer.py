"""Rollouts, MAPPO/HAPPO updates, evaluation and checkpointing.

Every source of randomness has its own generator spawned from the run seed,
so switching the cost pathway on or off never shifts the sampling streams.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from lamasafe.core import LanguageConstraint, discounted_return, sample_constraint, sorted_classes
from lamasafe.costlm import CostPredictor
from lamasafe.marl.config import EnvConfig, TrainConfig
from lamasafe.marl.gae import compute_gae, normalize
from lamasafe.marl.losses import LagrangeState, combined_advantage, ppo_policy_loss, regression_loss, update_lambda
from lamasafe.marl.tasks import make_task
from lamasafe.nn import AdamState, Mlp, PolicyHead, adam_step
from lamasafe.text import ConstraintCorpus

logger = logging.getLogger(__name__)

STREAMS = ("policy", "critic", "cost_critic", "env", "constraint", "sample", "minibatch", "happo", "eval")
CKPT_VERSION = 1


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, children)}


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


@dataclass
class Nets:
    actors: list[PolicyHead]
    critic: Mlp
    cost_critics: list[Mlp]
    actor_opts: list[AdamState]
    critic_opt: AdamState
    cost_opts: list[AdamState]

    @property
    def has_costs(self) -> bool:
        return bool(self.cost_critics)


def build_nets(
    head_kind: str,
    obs_dim: int,
    action_dim: int,
    n_agents: int,
    embed_dim: int,
    cfg: TrainConfig,
    streams: dict[str, np.random.Generator],
    with_costs: bool,
    action_bound: float | None = None,
) -> Nets:
    actor_in = obs_dim + embed_dim
    critic_in = n_agents * obs_dim + embed_dim
    actors = [
        PolicyHead.build(head_kind, actor_in, action_dim, cfg.hidden, streams["policy"], action_bound=action_bound)
        for _ in range(n_agents)
    ]
    critic = Mlp([critic_in, *cfg.hidden, 1], streams["critic"])
    cost_critics = [Mlp([critic_in, *cfg.hidden, 1], streams["cost_critic"]) for _ in range(n_agents)] if with_costs else []
    return Nets(
        actors=actors,
        critic=critic,
        cost_critics=cost_critics,
        actor_opts=[AdamState.like(a.params, cfg.actor_lr) for a in actors],
        critic_opt=AdamState.like(critic.params, cfg.critic_lr),
        cost_opts=[AdamState.like(c.params, cfg.critic_lr) for c in cost_critics],
    )


def flat_params(nets: Nets) -> np.ndarray:
    """All parameters concatenated; handy for trajectory comparisons."""
    parts = [p.ravel() for a in nets.actors for p in a.params] + [p.ravel() for p in nets.critic.params]
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Rollout buffer
# ---------------------------------------------------------------------------


@dataclass
class RolloutBuffer:
    """One rollout of ``T`` lockstep steps over ``E`` environments.

    Shapes: ``obs (T, E, N, F)``, ``state (T, E, G)``, ``actions (T, E, N, A)``,
    ``logp (T, E, N)``, ``rewards (T, E)``, ``costs (T, E, N)``,
    ``dones (T, E)``, ``values (T + 1, E)``, ``cost_values (T + 1, E, N)``.
    """

    obs: np.ndarray
    state: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    cost_values: np.ndarray
    descriptions: list = field(default_factory=list)

    def __post_init__(self):
        T = self.rewards.shape[0]
        for name in ("obs", "state", "actions", "logp", "costs", "dones"):
            if getattr(self, name).shape[0] != T:
                raise ValueError(f"buffer field {name} has length {getattr(self, name).shape[0]}, expected {T}")
        if self.values.shape[0] != T + 1 or self.cost_values.shape[0] != T + 1:
            raise ValueError("value estimates need a bootstrap row")
        for name in ("obs", "state", "actions", "logp", "rewards", "costs", "dones", "values", "cost_values"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            setattr(self, name, arr)

    @property
    def n_samples(self) -> int:
        return self.rewards.shape[0] * self.rewards.shape[1]

    @property
    def n_agents(self) -> int:
        return self.logp.shape[2]


@dataclass
class Advantages:
    actor: np.ndarray  # (B, N) combined, ready for the policy loss
    value_targets: np.ndarray  # (B,)
    cost_targets: np.ndarray  # (B, N)


def compute_advantages(buf: RolloutBuffer, cfg: TrainConfig, lam: float, use_costs: bool) -> Advantages:
    adv_r, targ_r = compute_gae(buf.rewards, buf.values, cfg.gamma, cfg.gae_lambda, buf.dones)
    B, N = buf.n_samples, buf.n_agents
    adv_r = adv_r.reshape(B)
    base = normalize(adv_r) if cfg.normalize_advantages else adv_r
    if not use_costs:
        return Advantages(np.repeat(base[:, None], N, axis=1), targ_r.reshape(B), np.zeros((B, N)))
    dones = np.broadcast_to(buf.dones[..., None], buf.costs.shape)
    adv_c, targ_c = compute_gae(buf.costs, buf.cost_values, cfg.gamma, cfg.gae_lambda, dones)
    adv_c = adv_c.reshape(B, N)
    actor = np.stack(
        [combined_advantage(adv_r, adv_c[:, i], lam, cfg.normalize_advantages) for i in range(N)], axis=1
    )
    return Advantages(actor, targ_r.reshape(B), targ_c.reshape(B, N))


# ---------------------------------------------------------------------------
# Updates
# ---------------------------------------------------------------------------


def _actor_step(nets: Nets, i: int, x, acts, logp_old, adv, cfg: TrainConfig) -> dict[str, float]:
    head = nets.actors[i]
    logp, ent, cache = head.evaluate(x, acts)
    loss, d_logp, d_ent = ppo_policy_loss(logp, logp_old, adv, cfg.clip, ent, cfg.entropy_coef)
    grads = head.backward(cache, acts, d_logp, d_ent)
    adam_step(head.params, grads, nets.actor_opts[i], cfg.max_grad_norm)
    head.touch()
    ratio = np.exp(logp - logp_old)
    return {
        "policy_loss": loss,
        "entropy": float(np.mean(ent)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
    }


def _regress(net: Mlp, opt: AdamState, x, target, scale: float, cfg: TrainConfig) -> float:
    v, tape = net.forward(x)
    loss, g = regression_loss(v[:, 0], target, scale)
    grads, _ = net.backward(tape, g[:, None])
    adam_step(net.params, grads, opt, cfg.max_grad_norm)
    net.touch()
    return loss


def _flat(buf: RolloutBuffer):
    B, N = buf.n_samples, buf.n_agents
    obs = buf.obs.reshape(B, N, -1)
    acts = buf.actions.reshape(B, N, -1)
    return obs, buf.state.reshape(B, -1), acts, buf.logp.reshape(B, N)


def _minibatches(rng: np.random.Generator, n: int, size: int):
    perm = rng.permutation(n)
    for start in range(0, n, size):
        yield perm[start : start + size]


def _update_critics(nets: Nets, buf: RolloutBuffer, adv: Advantages, cfg: TrainConfig, rng) -> dict[str, float]:
    _, state, _, _ = _flat(buf)
    v_losses, c_losses = [], []
    for _ in range(cfg.ppo_epochs):
        for idx in _minibatches(rng, buf.n_samples, cfg.batch_size):
            v_losses.append(_regress(nets.critic, nets.critic_opt, state[idx], adv.value_targets[idx], 1.0, cfg))
            for i, net in enumerate(nets.cost_critics):
                c_losses.append(_regress(net, nets.cost_opts[i], state[idx], adv.cost_targets[idx, i], 0.5, cfg))
    return {
        "value_loss": float(np.mean(v_losses)),
        "cost_value_loss": float(np.mean(c_losses)) if c_losses else 0.0,
    }


def _mean_stats(records: list[dict[str, float]]) -> dict[str, float]:
    return {k: float(np.mean([r[k] for r in records])) for k in records[0]} if records else {}


def mappo_update(buf: RolloutBuffer, nets: Nets, cfg: TrainConfig, adv: Advantages, rng: np.random.Generator) -> dict[str, float]:
    """Simultaneous PPO-clip update of every actor, then the critics."""
    obs, _, acts, logp_old = _flat(buf)
    records = []
    for _ in range(cfg.ppo_epochs):
        for idx in _minibatches(rng, buf.n_samples, cfg.batch_size):
            for i in range(buf.n_agents):
                records.append(_actor_step(nets, i, obs[idx, i], acts[idx, i], logp_old[idx, i], adv.actor[idx, i], cfg))
    stats = _mean_stats(records)
    stats.update(_update_critics(nets, buf, adv, cfg, rng))
    return stats


def happo_update(
    buf: RolloutBuffer,
    nets: Nets,
    cfg: TrainConfig,
    adv: Advantages,
    rng: np.random.Generator,
    perm_rng: np.random.Generator,
    order: Sequence[int] | None = None,
) -> dict[str, float]:
    """Sequential update in a random agent order.

    After agent ``k`` is updated, later agents see their advantage multiplied
    by ``k``'s probability ratio on the buffer actions.
    """
    obs, _, acts, logp_old = _flat(buf)
    order = list(perm_rng.permutation(buf.n_agents)) if order is None else list(order)
    scale = np.ones(buf.n_samples)
    records = []
    for i in order:
        agent_adv = adv.actor[:, i] * scale
        for _ in range(cfg.ppo_epochs):
            for idx in _minibatches(rng, buf.n_samples, cfg.batch_size):
                records.append(_actor_step(nets, i, obs[idx, i], acts[idx, i], logp_old[idx, i], agent_adv[idx], cfg))
        logp_new, _, _ = nets.actors[i].evaluate(obs[:, i], acts[:, i])
        scale = scale * np.exp(logp_new - logp_old[:, i])
    stats = _mean_stats(records)
    stats.update(_update_critics(nets, buf, adv, cfg, rng))
    stats["order"] = [int(i) for i in order]
    return stats


# ---------------------------------------------------------------------------
# Rollout machinery
# ---------------------------------------------------------------------------


class ConstraintSource:
    """Draws constraints and caches their condensed, embedded form."""

    def __init__(self, corpus: ConstraintCorpus, predictor: CostPredictor):
        self.corpus = corpus
        self.predictor = predictor
        self._prepared: dict[str, LanguageConstraint] = {}

    def draw(self, rng: np.random.Generator) -> LanguageConstraint:
        c = sample_constraint(self.corpus, rng)
        if c.raw not in self._prepared:
            self._prepared[c.raw] = self.predictor.prepare(c)
        return self._prepared[c.raw]


def _features(task, worlds, constraints) -> tuple[np.ndarray, np.ndarray]:
    obs, state = [], []
    for w, c in zip(worlds, constraints):
        o = task.observe(w)
        e = np.broadcast_to(c.embedding, (task.n_agents, c.embedding.size))
        obs.append(np.concatenate([o, e], axis=1))
        state.append(np.concatenate([o.ravel(), c.embedding]))
    return np.stack(obs), np.stack(state)


def _act(nets: Nets, obs: np.ndarray, rng: np.random.Generator | None):
    """Per-agent actions for a batch of envs; greedy when ``rng`` is None."""
    E, N = obs.shape[:2]
    env_actions, raw, logps = [], [], []
    for i, head in enumerate(nets.actors):
        if rng is None:
            a = head.mode(obs[:, i])
            env_actions.append(a)
            continue
        a, r, lp, _ = head.sample_and_logprob(obs[:, i], rng)
        env_actions.append(a)
        raw.append(r.reshape(E, -1))
        logps.append(lp)
    env_actions = np.stack(env_actions, axis=1)
    if rng is None:
        return env_actions, None, None
    return env_actions, np.stack(raw, axis=1), np.stack(logps, axis=1)


@dataclass
class EpisodeRecord:
    reward: float
    cost: float
    length: int
    violation_steps: int
    constraint: str
    condensed: str
    components: dict[str, float] = field(default_factory=dict)


class Runner:
    """Lockstep training rollouts over ``n_envs`` environments."""

    def __init__(self, task, nets: Nets, cfg: TrainConfig, source: ConstraintSource, streams, cost_source: str):
        self.task = task
        self.nets = nets
        self.cfg = cfg
        self.source = source
        self.streams = streams
        self.cost_source = cost_source
        self.worlds = [task.reset(streams["env"]) for _ in range(cfg.n_envs)]
        self.constraints = [source.draw(streams["constraint"]) for _ in range(cfg.n_envs)]
        self._zero()
        self.finished_cost_returns: list[float] = []
        self.finished: list[EpisodeRecord] = []

    def _zero(self):
        E = self.cfg.n_envs
        self.ep_reward = np.zeros(E)
        self.ep_cost = np.zeros(E)
        self.ep_len = np.zeros(E, dtype=np.int64)
        self.ep_train_costs: list[list[float]] = [[] for _ in range(E)]

    def _values(self, state: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        v = self.nets.critic(state)[:, 0]
        if self.nets.has_costs:
            vc = np.stack([c(state)[:, 0] for c in self.nets.cost_critics], axis=1)
        else:
            vc = np.zeros((len(state), self.task.n_agents))
        return v, vc

    def collect(self) -> RolloutBuffer:
        T, E, N = self.cfg.steps_per_update, self.cfg.n_envs, self.task.n_agents
        rows = {k: [] for k in ("obs", "state", "actions", "logp", "rewards", "costs", "dones", "values", "cost_values")}
        for _ in range(T):
            obs, state = _features(self.task, self.worlds, self.constraints)
            v, vc = self._values(state)
            env_act, raw, logp = _act(self.nets, obs, self.streams["sample"])
            rewards, costs, dones = np.zeros(E), np.zeros((E, N)), np.zeros(E)
            for e in range(E):
                outcome, nxt = self.task.step(self.worlds[e], env_act[e], self.constraints[e])
                rewards[e] = outcome.team_reward
                if self.cost_source == "predicted":
                    preds = self.source.predictor.predict_step(self.task.describe(nxt), self.constraints[e])
                    costs[e] = [p.value for p in preds]
                elif self.cost_source == "ground_truth":
                    costs[e] = outcome.cost_truth
                self.ep_reward[e] += outcome.team_reward
                self.ep_cost[e] += sum(outcome.cost_truth)
                self.ep_len[e] += 1
                self.ep_train_costs[e].append(float(costs[e].sum()))
                self.worlds[e] = nxt
                if outcome.done:
                    dones[e] = 1.0
                    self._finish(e)
            for k, val in zip(rows, (obs, state, raw, logp, rewards, costs, dones, v, vc)):
                rows[k].append(val)
        _, state = _features(self.task, self.worlds, self.constraints)
        v, vc = self._values(state)
        rows["values"].append(v)
        rows["cost_values"].append(vc)
        return RolloutBuffer(**{k: np.stack(val) for k, val in rows.items()})

    def _finish(self, e: int):
        c = self.constraints[e]
        self.finished.append(
            EpisodeRecord(float(self.ep_reward[e]), float(self.ep_cost[e]), int(self.ep_len[e]), 0, c.raw, c.condensed)
        )
        self.finished_cost_returns.append(discounted_return(self.ep_train_costs[e], self.cfg.gamma))
        self.ep_reward[e] = self.ep_cost[e] = 0.0
        self.ep_len[e] = 0
        self.ep_train_costs[e] = []
        self.worlds[e] = self.task.reset(self.streams["env"])
        self.constraints[e] = self.source.draw(self.streams["constraint"])


def eval_seed_for(seed: int) -> int:
    """Seed of the fixed evaluation layouts used by run ``seed``."""
    return int(make_streams(seed)["eval"].integers(2**63))


def evaluate(
    task, nets: Nets, source: ConstraintSource, episodes: int, seed: int, components: bool = False
) -> list[EpisodeRecord]:
    """Greedy-policy episodes on a fixed set of layouts and constraints.

    With ``components`` each record also splits its ground-truth cost by the
    constraint's hazard classes.
    """
    rng = np.random.default_rng(seed)
    worlds = [task.reset(rng) for _ in range(episodes)]
    constraints = [source.draw(rng) for _ in range(episodes)]
    reward = np.zeros(episodes)
    cost = np.zeros(episodes)
    length = np.zeros(episodes, dtype=np.int64)
    violations = np.zeros(episodes, dtype=np.int64)
    split: list[dict[str, float]] = [{} for _ in range(episodes)]
    singles = [
        {c.value: dataclasses.replace(con, hazard_classes=frozenset({c})) for c in sorted_classes(con.hazard_classes)}
        for con in constraints
    ]
    live = list(range(episodes))
    while live:
        obs, _ = _features(task, [worlds[e] for e in live], [constraints[e] for e in live])
        actions, _, _ = _act(nets, obs, None)
        still = []
        for k, e in enumerate(live):
            outcome, worlds[e] = task.step(worlds[e], actions[k], constraints[e])
            reward[e] += outcome.team_reward
            step_cost = sum(outcome.cost_truth)
            cost[e] += step_cost
            violations[e] += int(step_cost > 0)
            length[e] += 1
            if components:
                for name, single in singles[e].items():
                    split[e][name] = split[e].get(name, 0.0) + sum(task.cost_truth(worlds[e], single))
            if not outcome.done:
                still.append(e)
        live = still
    return [
        EpisodeRecord(
            float(reward[e]), float(cost[e]), int(length[e]), int(violations[e]),
            constraints[e].raw, constraints[e].condensed, split[e],
        )
        for e in range(episodes)
    ]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _dump(path: Path, data) -> None:
    path.write_text(json.dumps(data))


def save_checkpoint(out: Path, nets: Nets, lagrange: LagrangeState, streams, progress: dict, config: dict) -> None:
    (out / "nets").mkdir(parents=True, exist_ok=True)
    _dump(out / "config.json", config)
    for i, (a, opt) in enumerate(zip(nets.actors, nets.actor_opts)):
        _dump(out / "nets" / f"actor_{i}.ckpt", {"format_version": CKPT_VERSION, "head": a.to_dict(), "adam": opt.to_dict()})
    _dump(out / "nets" / "critic.ckpt", {"format_version": CKPT_VERSION, "net": nets.critic.to_dict(), "adam": nets.critic_opt.to_dict()})
    for i, (c, opt) in enumerate(zip(nets.cost_critics, nets.cost_opts)):
        _dump(out / "nets" / f"cost_critic_{i}.ckpt", {"format_version": CKPT_VERSION, "net": c.to_dict(), "adam": opt.to_dict()})
    _dump(out / "lagrange.json", {"lambda": lagrange.lam, "lr": lagrange.lr, "budget": lagrange.budget})
    _dump(out / "rng.json", {"streams": {k: g.bit_generator.state for k, g in streams.items()}, "progress": progress})


def _load(path: Path) -> dict:
    data = json.loads(path.read_text())
    if data.get("format_version", CKPT_VERSION) != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}")
    return data


def load_nets(out: Path, nets: Nets) -> Nets:
    """Overwrite ``nets`` (built with the same shapes) from a checkpoint directory."""
    out = Path(out)
    for i in range(len(nets.actors)):
        data = _load(out / "nets" / f"actor_{i}.ckpt")
        head = PolicyHead.from_dict(data["head"])
        if [p.shape for p in head.params] != [p.shape for p in nets.actors[i].params]:
            raise ValueError("checkpoint does not match the environment's network shapes")
        nets.actors[i] = head
        nets.actor_opts[i] = AdamState.from_dict(data["adam"], head.params)
    data = _load(out / "nets" / "critic.ckpt")
    nets.critic = Mlp.from_dict(data["net"])
    nets.critic_opt = AdamState.from_dict(data["adam"], nets.critic.params)
    for i in range(len(nets.cost_critics)):
        data = _load(out / "nets" / f"cost_critic_{i}.ckpt")
        nets.cost_critics[i] = Mlp.from_dict(data["net"])
        nets.cost_opts[i] = AdamState.from_dict(data["adam"], nets.cost_critics[i].params)
    return nets


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    metrics: list[dict]
    nets: Nets
    lagrange: LagrangeState
    final_eval: list[EpisodeRecord]


def train(
    cfg: TrainConfig,
    env_cfg: EnvConfig,
    corpus: ConstraintCorpus,
    predictor: CostPredictor,
    seed: int = 0,
    out_dir: str | Path | None = None,
    resume: bool = False,
    on_update: Callable[[int, Nets], None] | None = None,
) -> TrainResult:
    """Run one seed of constrained multi-agent training.

    Metrics are emitted after each evaluation, every ``eval_interval`` env
    steps (counted over all parallel environments) and once at the end.
    """
    task = make_task(env_cfg)
    cost_source = cfg.resolved_cost_source
    use_costs = cost_source != "none"
    streams = make_streams(seed)
    nets = build_nets(
        task.head_kind, task.obs_dim, task.action_dim, task.n_agents, predictor.encoder.dim, cfg, streams,
        use_costs, getattr(task, "action_bound", None),
    )
    lagrange = LagrangeState(cfg.lambda_init, cfg.lambda_lr, cfg.cost_budget)
    source = ConstraintSource(corpus, predictor)
    eval_seed = eval_seed_for(seed)
    step, episode, n_update = 0, 0, 0
    config_record = {"train": cfg.to_dict(), "env": env_cfg.to_dict(), "seed": seed}

    out = Path(out_dir) if out_dir is not None else None
    metrics_path = out / "metrics.jsonl" if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (out / "rng.json").exists():
            load_nets(out, nets)
            lg = json.loads((out / "lagrange.json").read_text())
            lagrange = LagrangeState(lg["lambda"], lg["lr"], lg["budget"])
            saved = json.loads((out / "rng.json").read_text())
            for k, st in saved["streams"].items():
                streams[k].bit_generator.state = st
            step, episode, n_update = (saved["progress"][k] for k in ("step", "episode", "updates"))
            logger.info("resumed from %s at step %d", out, step)
        elif metrics_path.exists():
            metrics_path.unlink()

    runner = Runner(task, nets, cfg, source, streams, cost_source)
    metrics: list[dict] = []
    stats: dict = {}
    predicted: list[float] = []
    next_eval = (step // cfg.eval_interval + 1) * cfg.eval_interval
    final_eval: list[EpisodeRecord] = []

    def emit():
        nonlocal final_eval
        final_eval = evaluate(task, nets, source, cfg.eval_episodes, eval_seed)
        rec = {
            "step": step,
            "episode": episode,
            "eval_reward_mean": float(np.mean([r.reward for r in final_eval])),
            "eval_cost_mean": float(np.mean([r.cost for r in final_eval])),
            "lambda": lagrange.lam,
            "mean_predicted_cost": float(np.mean(predicted)) if predicted and cost_source == "predicted" else None,
            "policy_loss": stats.get("policy_loss"),
            "value_loss": stats.get("value_loss"),
            "cost_value_loss": stats.get("cost_value_loss"),
            "entropy": stats.get("entropy"),
            "eval_policy": "greedy",
        }
        metrics.append(rec)
        logger.info("step %d reward %.3f cost %.3f lambda %.5f", step, rec["eval_reward_mean"], rec["eval_cost_mean"], lagrange.lam)
        if out is not None:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            progress = {"step": step, "episode": episode, "updates": n_update}
            save_checkpoint(out, nets, lagrange, streams, progress, config_record)

    while step < cfg.total_steps:
        buf = runner.collect()
        step += buf.n_samples
        episode += len(runner.finished)
        runner.finished.clear()
        predicted.extend(buf.costs.mean(axis=(1, 2)).tolist())
        adv = compute_advantages(buf, cfg, lagrange.lam, use_costs)
        if cfg.algorithm.sequential:
            stats = happo_update(buf, nets, cfg, adv, streams["minibatch"], streams["happo"])
        else:
            stats = mappo_update(buf, nets, cfg, adv, streams["minibatch"])
        n_update += 1
        if use_costs and runner.finished_cost_returns:
            lagrange = update_lambda(lagrange, float(np.mean(runner.finished_cost_returns)))
        runner.finished_cost_returns.clear()
        if on_update is not None:
            on_update(n_update, nets)
        if step >= next_eval or step >= cfg.total_steps:
            emit()
            predicted.clear()
            next_eval = (step // cfg.eval_interval + 1) * cfg.eval_interval
    if not metrics and not final_eval:
        emit()
    return TrainResult(metrics, nets, lagrange, final_eval)
