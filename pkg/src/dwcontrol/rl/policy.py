"""Gaussian policy with tanh squashing onto the bounded amplitude range.

Actions are a = L*tanh(u) with u ~ Normal(mean, exp(log_std)); log-densities
carry the change-of-variables correction, computed from the stored
pre-squash sample so the PPO ratio never needs an atanh.
"""

from __future__ import annotations

import math

import numpy as np

from ..control import AMPLITUDE_LIMIT, ControlAction, ControlObservation
from .network import network_forward

LOG_2PI = math.log(2.0 * math.pi)


def squash(u: np.ndarray) -> np.ndarray:
    return AMPLITUDE_LIMIT * np.tanh(u)


def _log_one_minus_tanh_sq(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2) = 2*(log 2 - u - softplus(-2u)), stable for large |u|
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def log_prob_of(u: np.ndarray, mean: np.ndarray, log_std: float) -> np.ndarray:
    """Log-density of the squashed action identified by its pre-squash u."""
    z = (u - mean) * np.exp(-log_std)
    normal = -0.5 * z * z - log_std - 0.5 * LOG_2PI
    return normal - (math.log(AMPLITUDE_LIMIT) + _log_one_minus_tanh_sq(u))


def sample_action(mean: np.ndarray, log_std: float, rng: np.random.Generator):
    """Draw (u, amplitude, log_prob) for a batch of Gaussian means."""
    mean = np.asarray(mean, dtype=float)
    u = mean + np.exp(log_std) * rng.normal(size=mean.shape)
    return u, squash(u), log_prob_of(u, mean, log_std)


def deterministic_action(mean: np.ndarray) -> np.ndarray:
    return squash(np.asarray(mean, dtype=float))


def gaussian_entropy(log_std: float) -> float:
    return 0.5 * (1.0 + LOG_2PI) + log_std


class PolicyController:
    """Adapts trained policy parameters to the controller interface.

    Builds the same observation vector the training environment produced
    (windowed current mean and previous action, optionally normalized).
    """

    def __init__(
        self,
        params: dict[str, np.ndarray],
        deterministic: bool = True,
        normalize_observations: bool = False,
        record_gain: float = 1.0,
        b: float = 3.0,
    ):
        self.params = params
        self.deterministic = deterministic
        self.normalize_observations = normalize_observations
        self.record_gain = record_gain
        self.b = b

    def _vector(self, obs: ControlObservation) -> np.ndarray:
        if self.normalize_observations:
            b2 = self.b**2
            return np.array(
                [
                    (obs.current_mean4 / self.record_gain - b2) / b2,
                    obs.last_action / AMPLITUDE_LIMIT,
                ]
            )
        return np.array([obs.current_mean4, obs.last_action])

    def act(self, obs: ControlObservation, rng) -> ControlAction:
        mean, log_std, _, _ = network_forward(self.params, self._vector(obs)[None, :])
        if self.deterministic:
            amp = float(deterministic_action(mean)[0])
        else:
            _, amps, _ = sample_action(mean, log_std, rng)
            amp = float(amps[0])
        return ControlAction(amp)
