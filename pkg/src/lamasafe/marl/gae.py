"""Generalized advantage estimation."""

from __future__ import annotations

import numpy as np


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    gamma: float,
    lam: float,
    dones: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Recursive GAE over the leading (time) axis.

    Args:
        rewards: shape ``(T, ...)``; rewards or costs.
        values: shape ``(T + 1, ...)``; the last row bootstraps the tail.
        gamma: discount factor.
        lam: GAE trace parameter.
        dones: shape ``(T, ...)``; ``dones[t]`` ends the episode after step
            ``t``, cutting both the bootstrap and the trace.

    Returns:
        ``(advantages, targets)`` with ``targets = advantages + values[:-1]``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    T = rewards.shape[0]
    if values.shape[0] != T + 1 or values.shape[1:] != rewards.shape[1:]:
        raise ValueError(f"values must have shape {(T + 1,) + rewards.shape[1:]}, got {values.shape}")
    if dones is None:
        dones = np.zeros_like(rewards)
    dones = np.asarray(dones, dtype=np.float64)
    if dones.shape != rewards.shape:
        raise ValueError("dones must match rewards in shape")
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
    return adv, adv + values[:-1]


def normalize(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Zero-mean, unit-std copy of ``x`` (over all entries)."""
    x = np.asarray(x, dtype=np.float64)
    return (x - x.mean()) / (x.std() + eps)
