"""Constrained multi-agent PPO trainers."""

from lamasafe.marl.config import Algorithm, EnvConfig, TrainConfig
from lamasafe.marl.gae import compute_gae, normalize
from lamasafe.marl.losses import (
    LagrangeState,
    combined_advantage,
    cost_value_loss,
    ppo_policy_loss,
    update_lambda,
    value_loss,
)
from lamasafe.marl.trainer import (
    Nets,
    RolloutBuffer,
    TrainResult,
    build_nets,
    compute_advantages,
    evaluate,
    flat_params,
    happo_update,
    mappo_update,
    train,
)

__all__ = [
    "Algorithm", "EnvConfig", "TrainConfig", "compute_gae", "normalize", "LagrangeState", "combined_advantage",
    "cost_value_loss", "ppo_policy_loss", "update_lambda", "value_loss", "Nets", "RolloutBuffer", "TrainResult",
    "build_nets", "compute_advantages", "evaluate", "flat_params", "happo_update", "mappo_update", "train",
]
