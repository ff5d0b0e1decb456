"""Clipped-surrogate PPO on synchronous vectorized environments.

The trainer gathers fixed-horizon rollouts from n_envs lockstep workers,
estimates advantages with GAE, and performs several epochs of shuffled
minibatch updates of the clipped objective with a bias-corrected
moment-based optimizer.  All gradients come from the hand-written
reverse-mode pass in :mod:`.network`, so they can be validated against
finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..seeding import as_seed_sequence
from .network import init_params, network_backward, network_forward
from .policy import gaussian_entropy, log_prob_of, sample_action, squash


@dataclass(frozen=True)
class PpoConfig:
    clip_eps: float = 0.2
    lr: float = 1e-5
    n_envs: int = 8
    horizon: int = 4000
    minibatch: int = 100
    epochs: int = 10
    discount: float = 0.99
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    hidden_sizes: tuple[int, int, int] = (512, 256, 128)
    log_std_init: float = 0.0
    reward_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError(f"clip_eps must be in (0, 1), got {self.clip_eps}")
        if self.horizon < 1 or self.n_envs < 1:
            raise ValueError("horizon and n_envs must be positive")
        if self.minibatch < 1 or self.minibatch > self.horizon * self.n_envs:
            raise ValueError(
                f"minibatch {self.minibatch} incompatible with "
                f"{self.horizon}x{self.n_envs} samples"
            )
        if not 0.0 < self.discount <= 1.0:
            raise ValueError(f"discount must be in (0, 1], got {self.discount}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")


@dataclass
class RolloutBatch:
    """Flattened per-step arrays across all envs for one update."""

    obs: np.ndarray          # (N, obs_dim)
    pre_squash: np.ndarray   # (N,) Gaussian samples u
    actions: np.ndarray      # (N,) executed amplitudes
    log_prob_old: np.ndarray
    value_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return self.obs.shape[0]


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    bootstrap_value: np.ndarray,
    discount: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimate over a (T, B) rollout.

    ``dones[t]`` marks a terminal transition (no bootstrapping across it);
    ``bootstrap_value`` continues the final step if it is not terminal.
    Returns ``(advantages, returns)`` with returns = advantages + values.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError(
            f"shape mismatch: rewards {rewards.shape}, values {values.shape}, "
            f"dones {dones.shape}"
        )
    t_len, n_envs = rewards.shape
    bootstrap_value = np.asarray(bootstrap_value, dtype=float).reshape(n_envs)
    advantages = np.zeros_like(rewards)
    next_value = bootstrap_value
    next_adv = np.zeros(n_envs)
    for t in range(t_len - 1, -1, -1):
        alive = ~dones[t]
        delta = rewards[t] + discount * next_value * alive - values[t]
        next_adv = delta + discount * lam * next_adv * alive
        advantages[t] = next_adv
        next_value = values[t]
    return advantages, advantages + values


def ppo_loss_and_grads(
    params: dict[str, np.ndarray], batch: RolloutBatch, cfg: PpoConfig
) -> tuple[dict, dict[str, np.ndarray]]:
    """Clipped-surrogate loss, diagnostics, and analytic gradients.

    The probability ratio is formed in log space (always positive); the
    clipped branch contributes no gradient.  The entropy bonus uses the
    pre-squash Gaussian entropy, whose only parameter dependence is log_std.
    """
    n = len(batch)
    mean, log_std, value, cache = network_forward(params, batch.obs)
    lp_new = log_prob_of(batch.pre_squash, mean, log_std)
    ratio = np.exp(lp_new - batch.log_prob_old)
    adv = batch.advantages
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv
    policy_loss = -float(np.minimum(unclipped, clipped).mean())
    value_err = value - batch.returns
    value_loss = float(np.mean(value_err**2))
    entropy = gaussian_entropy(log_std)
    total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

    # d(total)/d(lp_new): only where the unclipped branch realizes the min.
    use_unclipped = unclipped <= clipped
    d_lp = np.where(use_unclipped, -ratio * adv, 0.0) / n
    inv_var = math.exp(-2.0 * log_std)
    centered = batch.pre_squash - mean
    d_mean = d_lp * centered * inv_var
    d_log_std = float(np.sum(d_lp * (centered**2 * inv_var - 1.0))) - cfg.entropy_coef
    d_value = cfg.value_coef * 2.0 * value_err / n
    grads = network_backward(params, cache, d_mean, d_value, d_log_std)
    metrics = {
        "loss": total,
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
        "ratio_min": float(ratio.min()),
    }
    return metrics, grads


class Adam:
    """Bias-corrected first/second-moment gradient method."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for key, grad in grads.items():
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * grad
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * grad**2
            step = lr * (self.m[key] / b1c) / (np.sqrt(self.v[key] / b2c) + self.eps)
            params[key] = params[key] - step

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for key in self.m:
            out[f"m.{key}"] = self.m[key]
            out[f"v.{key}"] = self.v[key]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for key in self.m:
            self.m[key] = arrays[f"m.{key}"].copy()
            self.v[key] = arrays[f"v.{key}"].copy()


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for key in grads:
            grads[key] = grads[key] * scale
    return total


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    if std == 0.0:
        return adv - adv.mean()
    return (adv - adv.mean()) / std


class PPOTrainer:
    """Synchronous actor-critic training loop over a vectorized environment.

    The environment must expose ``reset(seed=...) -> obs``,
    ``step(amplitudes) -> (obs, rewards, done_or_dones, info)`` and
    ``OBS_DIM``; the quantum vector env signals one shared ``done`` (fixed
    episode length, auto-reset), the toy env per-member flags.
    """

    def __init__(self, env, cfg: PpoConfig, seed: int):
        self.env = env
        self.cfg = cfg
        ss = as_seed_sequence(seed)
        init_ss, act_ss, shuffle_ss, env_ss = ss.spawn(4)
        self.params = init_params(
            env.OBS_DIM, cfg.hidden_sizes, np.random.default_rng(init_ss), cfg.log_std_init
        )
        self.adam = Adam(self.params)
        self._rng_actions = np.random.default_rng(act_ss)
        self._rng_shuffle = np.random.default_rng(shuffle_ss)
        self._obs = env.reset(seed=env_ss)
        self.lr = cfg.lr
        self.iteration = 0
        self.total_steps = 0
        self._lr_halvings = 0

    # -- rollout -------------------------------------------------------------

    def collect(self) -> tuple[RolloutBatch, dict]:
        cfg = self.cfg
        t_len, n_envs = cfg.horizon, cfg.n_envs
        obs_dim = self.env.OBS_DIM
        obs_buf = np.empty((t_len, n_envs, obs_dim))
        u_buf = np.empty((t_len, n_envs))
        act_buf = np.empty((t_len, n_envs))
        lp_buf = np.empty((t_len, n_envs))
        val_buf = np.empty((t_len, n_envs))
        rew_buf = np.empty((t_len, n_envs))
        done_buf = np.zeros((t_len, n_envs), dtype=bool)
        fid_sum = 0.0
        fid_count = 0
        aborts = 0
        if hasattr(self.env, "finished_returns"):
            self.env.finished_returns = []
        episode_rewards: list[float] = []
        ep_start = 0
        for t in range(t_len):
            mean, log_std, value, _ = network_forward(self.params, self._obs)
            u, amps, lp = sample_action(mean, log_std, self._rng_actions)
            obs_buf[t] = self._obs
            u_buf[t] = u
            act_buf[t] = amps
            lp_buf[t] = lp
            val_buf[t] = value
            next_obs, rewards, done, info = self.env.step(amps)
            rew_buf[t] = rewards
            if np.ndim(done) == 0:
                done_buf[t] = bool(done)
                if done:
                    episode_rewards.extend(rew_buf[ep_start : t + 1].mean(axis=0).tolist())
                    ep_start = t + 1
            else:
                done_buf[t] = done
            if isinstance(info, dict) and "fidelity" in info:
                fid_sum += float(np.sum(info["fidelity"]))
                fid_count += n_envs
                aborts += int(np.sum(info["aborted"]))
            self._obs = next_obs
        _, _, bootstrap, _ = network_forward(self.params, self._obs)
        adv, rets = compute_gae(
            rew_buf * cfg.reward_scale,
            val_buf,
            done_buf,
            bootstrap,
            cfg.discount,
            cfg.gae_lambda,
        )
        batch = RolloutBatch(
            obs=obs_buf.reshape(-1, obs_dim),
            pre_squash=u_buf.reshape(-1),
            actions=act_buf.reshape(-1),
            log_prob_old=lp_buf.reshape(-1),
            value_old=val_buf.reshape(-1),
            advantages=adv.reshape(-1),
            returns=rets.reshape(-1),
        )
        self.total_steps += t_len * n_envs
        stats = {
            "mean_reward": float(rew_buf.mean()),
            "mean_fidelity": fid_sum / fid_count if fid_count else float("nan"),
            "aborts": aborts,
            "episode_mean_rewards": episode_rewards,
            "episode_returns": list(getattr(self.env, "finished_returns", [])),
        }
        return batch, stats

    # -- optimization ----------------------------------------------------------

    def update(self, batch: RolloutBatch) -> dict:
        cfg = self.cfg
        batch.advantages = normalize_advantages(batch.advantages)
        snapshot = {k: v.copy() for k, v in self.params.items()}
        adam_snapshot = ({k: v.copy() for k, v in self.adam.m.items()},
                         {k: v.copy() for k, v in self.adam.v.items()}, self.adam.t)
        n = len(batch)
        agg: dict[str, float] = {}
        count = 0
        for _ in range(cfg.epochs):
            perm = self._rng_shuffle.permutation(n)
            for start in range(0, n - cfg.minibatch + 1, cfg.minibatch):
                idx = perm[start : start + cfg.minibatch]
                mb = RolloutBatch(
                    obs=batch.obs[idx],
                    pre_squash=batch.pre_squash[idx],
                    actions=batch.actions[idx],
                    log_prob_old=batch.log_prob_old[idx],
                    value_old=batch.value_old[idx],
                    advantages=batch.advantages[idx],
                    returns=batch.returns[idx],
                )
                metrics, grads = ppo_loss_and_grads(self.params, mb, cfg)
                if not math.isfinite(metrics["loss"]):
                    self.params = snapshot
                    self.adam.m, self.adam.v, self.adam.t = adam_snapshot
                    self._lr_halvings += 1
                    if self._lr_halvings > 1:
                        raise RuntimeError("repeated non-finite PPO loss; aborting training")
                    self.lr *= 0.5
                    return {"recovered_from_nan": 1.0, "loss": float("nan")}
                clip_grad_norm(grads, cfg.max_grad_norm)
                self.adam.step(self.params, grads, self.lr)
                for key, val in metrics.items():
                    agg[key] = agg.get(key, 0.0) + val
                count += 1
        out = {key: val / count for key, val in agg.items()}
        out["recovered_from_nan"] = 0.0
        return out

    # -- driver ----------------------------------------------------------------

    def train(self, iterations: int, on_iteration=None) -> list[dict]:
        """Run full collect/update iterations; returns one metrics row each.

        ``on_iteration(row)`` fires after every iteration (metrics streaming,
        checkpointing).
        """
        rows = []
        for _ in range(iterations):
            batch, stats = self.collect()
            update_metrics = self.update(batch)
            self.iteration += 1
            row = {
                "iteration": self.iteration,
                "steps": self.total_steps,
                "mean_reward": stats["mean_reward"],
                "mean_episode_reward": (
                    float(np.mean(stats["episode_mean_rewards"]))
                    if stats["episode_mean_rewards"]
                    else stats["mean_reward"]
                ),
                "mean_episode_return": (
                    float(np.mean(stats["episode_returns"]))
                    if stats["episode_returns"]
                    else float("nan")
                ),
                "mean_fidelity": stats["mean_fidelity"],
                "policy_loss": update_metrics.get("policy_loss", float("nan")),
                "value_loss": update_metrics.get("value_loss", float("nan")),
                "clip_fraction": update_metrics.get("clip_fraction", float("nan")),
                "entropy": update_metrics.get("entropy", float("nan")),
                "aborts": stats["aborts"],
                "lr": self.lr,
            }
            rows.append(row)
            if on_iteration is not None:
                on_iteration(row, self)
        return rows


def evaluate_policy(
    env,
    params: dict[str, np.ndarray] | None,
    n_episodes_steps: int,
    deterministic: bool = True,
    action_seed: int = 0,
) -> dict:
    """Roll the policy (or the zero-amplitude baseline) over full episodes.

    ``env`` is a vector env with one member per evaluation episode and
    auto-reset disabled; returns per-episode mean/max fidelity and mean
    reward plus their aggregates.
    """
    rng = np.random.default_rng(action_seed)
    obs = env.observations()
    n_envs = obs.shape[0]
    fids = np.zeros((n_episodes_steps, n_envs))
    rews = np.zeros((n_episodes_steps, n_envs))
    for t in range(n_episodes_steps):
        if params is None:
            amps = np.zeros(n_envs)
        else:
            mean, log_std, _, _ = network_forward(params, obs)
            if deterministic:
                amps = squash(mean)
            else:
                _, amps, _ = sample_action(mean, log_std, rng)
        obs, rewards, done, info = env.step(amps)
        fids[t] = info["fidelity"]
        rews[t] = rewards
    per_episode_mean_fid = fids.mean(axis=0)
    return {
        "episode_mean_fidelity": per_episode_mean_fid,
        "episode_max_fidelity": fids.max(axis=0),
        "episode_mean_reward": rews.mean(axis=0),
        "mean_fidelity": float(per_episode_mean_fid.mean()),
        "max_fidelity": float(fids.max()),
        "mean_reward": float(rews.mean()),
    }
