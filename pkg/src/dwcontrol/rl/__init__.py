"""Self-contained PPO actor-critic stack (numpy, float64, reverse-mode)."""

from .network import init_params, network_forward, network_backward
from .policy import (
    deterministic_action,
    gaussian_entropy,
    log_prob_of,
    sample_action,
    squash,
)
from .ppo import Adam, PpoConfig, PPOTrainer, RolloutBatch, compute_gae, ppo_loss_and_grads
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint

__all__ = [
    "Adam",
    "Checkpoint",
    "PpoConfig",
    "PPOTrainer",
    "RolloutBatch",
    "compute_gae",
    "deterministic_action",
    "gaussian_entropy",
    "init_params",
    "load_checkpoint",
    "log_prob_of",
    "network_backward",
    "network_forward",
    "ppo_loss_and_grads",
    "sample_action",
    "save_checkpoint",
    "squash",
]
