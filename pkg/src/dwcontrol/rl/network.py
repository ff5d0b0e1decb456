"""Shared-trunk actor-critic MLP with explicit reverse-mode gradients.

One shared tanh layer feeds two tanh branches (actor and critic); the actor
head emits the pre-squash Gaussian mean, the critic head a scalar value,
and a state-independent log-std parameter completes the policy.  Everything
is float64 numpy so gradients can be checked against central finite
differences tightly.
"""

from __future__ import annotations

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0

# (name, kind) pairs fix the canonical parameter order for flattening,
# checkpoints and the optimizer.
def parameter_layout(obs_dim: int, hidden: tuple[int, int, int]) -> list[tuple[str, tuple[int, ...]]]:
    h0, h1, h2 = hidden
    return [
        ("shared.w", (obs_dim, h0)),
        ("shared.b", (h0,)),
        ("actor1.w", (h0, h1)),
        ("actor1.b", (h1,)),
        ("actor2.w", (h1, h2)),
        ("actor2.b", (h2,)),
        ("actor_mean.w", (h2, 1)),
        ("actor_mean.b", (1,)),
        ("critic1.w", (h0, h1)),
        ("critic1.b", (h1,)),
        ("critic2.w", (h1, h2)),
        ("critic2.b", (h2,)),
        ("critic_out.w", (h2, 1)),
        ("critic_out.b", (1,)),
        ("log_std", (1,)),
    ]


def _orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    a = rng.normal(size=shape)
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    q = u if u.shape == shape else vt
    return gain * q


def init_params(
    obs_dim: int,
    hidden: tuple[int, int, int],
    rng: np.random.Generator,
    log_std_init: float = 0.0,
) -> dict[str, np.ndarray]:
    """Orthogonally initialized parameters; small gain on the policy head."""
    gains = {
        "shared.w": np.sqrt(2.0),
        "actor1.w": np.sqrt(2.0),
        "actor2.w": np.sqrt(2.0),
        "critic1.w": np.sqrt(2.0),
        "critic2.w": np.sqrt(2.0),
        "actor_mean.w": 0.01,
        "critic_out.w": 1.0,
    }
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_layout(obs_dim, hidden):
        if name.endswith(".w"):
            params[name] = _orthogonal(rng, shape, gains[name])
        elif name == "log_std":
            params[name] = np.full(shape, float(log_std_init))
        else:
            params[name] = np.zeros(shape)
    return params


def network_forward(params: dict[str, np.ndarray], obs: np.ndarray):
    """Returns (mean (B,), log_std scalar, value (B,), cache for backward)."""
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    s = np.tanh(obs @ params["shared.w"] + params["shared.b"])
    a1 = np.tanh(s @ params["actor1.w"] + params["actor1.b"])
    a2 = np.tanh(a1 @ params["actor2.w"] + params["actor2.b"])
    mean = (a2 @ params["actor_mean.w"] + params["actor_mean.b"])[:, 0]
    c1 = np.tanh(s @ params["critic1.w"] + params["critic1.b"])
    c2 = np.tanh(c1 @ params["critic2.w"] + params["critic2.b"])
    value = (c2 @ params["critic_out.w"] + params["critic_out.b"])[:, 0]
    raw_log_std = params["log_std"][0]
    log_std = float(np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX))
    cache = {"obs": obs, "s": s, "a1": a1, "a2": a2, "c1": c1, "c2": c2,
             "clip_active": not (LOG_STD_MIN < raw_log_std < LOG_STD_MAX)}
    return mean, log_std, value, cache


def network_backward(
    params: dict[str, np.ndarray],
    cache: dict,
    d_mean: np.ndarray,
    d_value: np.ndarray,
    d_log_std: float,
) -> dict[str, np.ndarray]:
    """Gradients of sum(d_mean*mean + d_value*value + d_log_std*log_std)."""
    obs, s = cache["obs"], cache["s"]
    a1, a2, c1, c2 = cache["a1"], cache["a2"], cache["c1"], cache["c2"]
    grads: dict[str, np.ndarray] = {}
    dm = np.asarray(d_mean, dtype=float)[:, None]
    dv = np.asarray(d_value, dtype=float)[:, None]

    grads["actor_mean.w"] = a2.T @ dm
    grads["actor_mean.b"] = dm.sum(axis=0)
    da2 = (dm @ params["actor_mean.w"].T) * (1.0 - a2 * a2)
    grads["actor2.w"] = a1.T @ da2
    grads["actor2.b"] = da2.sum(axis=0)
    da1 = (da2 @ params["actor2.w"].T) * (1.0 - a1 * a1)
    grads["actor1.w"] = s.T @ da1
    grads["actor1.b"] = da1.sum(axis=0)
    ds = da1 @ params["actor1.w"].T

    grads["critic_out.w"] = c2.T @ dv
    grads["critic_out.b"] = dv.sum(axis=0)
    dc2 = (dv @ params["critic_out.w"].T) * (1.0 - c2 * c2)
    grads["critic2.w"] = c1.T @ dc2
    grads["critic2.b"] = dc2.sum(axis=0)
    dc1 = (dc2 @ params["critic2.w"].T) * (1.0 - c1 * c1)
    grads["critic1.w"] = s.T @ dc1
    grads["critic1.b"] = dc1.sum(axis=0)
    ds = ds + dc1 @ params["critic1.w"].T

    ds = ds * (1.0 - s * s)
    grads["shared.w"] = obs.T @ ds
    grads["shared.b"] = ds.sum(axis=0)
    grads["log_std"] = np.array([0.0 if cache["clip_active"] else float(d_log_std)])
    return grads
