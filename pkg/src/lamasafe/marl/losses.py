"""Critic losses, the clipped policy surrogate and the Lagrange multiplier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lamasafe.marl.gae import normalize


def _td_error(v_pred, signal, v_next, gamma, dones=None) -> np.ndarray:
    v_pred = np.asarray(v_pred, dtype=np.float64)
    live = 1.0 if dones is None else 1.0 - np.asarray(dones, dtype=np.float64)
    return np.asarray(signal, dtype=np.float64) + gamma * np.asarray(v_next, dtype=np.float64) * live - v_pred


def value_loss(v_pred, rewards, v_next, gamma: float, dones=None) -> float:
    """Mean squared one-step TD error; ``v_next`` is treated as a constant."""
    td = _td_error(v_pred, rewards, v_next, gamma, dones)
    return float(np.mean(td * td))


def cost_value_loss(vc_pred, costs, vc_next, gamma: float, dones=None) -> float:
    """Half the mean squared one-step TD error of a cost critic."""
    td = _td_error(vc_pred, costs, vc_next, gamma, dones)
    return float(0.5 * np.mean(td * td))


def regression_loss(pred: np.ndarray, target: np.ndarray, scale: float = 1.0) -> tuple[float, np.ndarray]:
    """``scale * mean((target - pred)^2)`` and its gradient in ``pred``."""
    err = np.asarray(target) - np.asarray(pred)
    n = err.size
    return float(scale * np.mean(err * err)), -2.0 * scale * err / n


def ppo_policy_loss(
    logp_new: np.ndarray,
    logp_old: np.ndarray,
    advantage: np.ndarray,
    clip: float = 0.2,
    entropy: np.ndarray | None = None,
    entropy_coef: float = 0.0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Clipped surrogate loss with an entropy bonus.

    Returns ``(loss, dloss/dlogp_new, dloss/dentropy)``. Samples whose ratio
    sits on the clipped branch of the minimum get zero policy gradient.
    """
    logp_new = np.asarray(logp_new, dtype=np.float64)
    adv = np.asarray(advantage, dtype=np.float64)
    n = logp_new.size
    ratio = np.exp(logp_new - np.asarray(logp_old, dtype=np.float64))
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    loss = -float(np.mean(np.minimum(surr1, surr2)))
    d_logp = np.where(surr1 <= surr2, -surr1 / n, 0.0)
    d_ent = np.zeros(n)
    if entropy is not None and entropy_coef:
        loss -= entropy_coef * float(np.mean(entropy))
        d_ent = np.full(n, -entropy_coef / n)
    return loss, d_logp, d_ent


def combined_advantage(adv_reward: np.ndarray, adv_cost: np.ndarray, lam: float, normalized: bool = True) -> np.ndarray:
    """Advantage of the Lagrangian ``J_r - lambda * J_c``.

    With ``normalized`` each input is standardized before combining.
    """
    if normalized:
        adv_reward, adv_cost = normalize(adv_reward), normalize(adv_cost)
    return np.asarray(adv_reward) - lam * np.asarray(adv_cost)


@dataclass
class LagrangeState:
    lam: float = 0.78
    lr: float = 1e-5
    budget: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


def update_lambda(state: LagrangeState, episode_cost_return: float) -> LagrangeState:
    """Projected dual ascent: ``lambda <- max(0, lambda + lr * (J_c - d))``."""
    lam = max(0.0, state.lam + state.lr * (float(episode_cost_return) - state.budget))
    return LagrangeState(lam=lam, lr=state.lr, budget=state.budget)
