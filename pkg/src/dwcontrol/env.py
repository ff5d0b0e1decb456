"""Episode-structured environments for reinforcement learning.

The quantum environment wraps the conditional double-well evolution into a
fixed-length episodic step contract: observations are the windowed mean of
recent measurement currents plus the previously applied action, rewards
follow the record-based law -|I/gain - b^2| (or ground-state fidelity), and
every episode lasts exactly ``steps_per_episode`` control intervals.  A
synchronous vectorized variant advances several independent copies in
lockstep for the trainer.

The classical inverted-oscillator environment is a cheap testbed for the RL
stack: a ball on a frictionless hill, discrete forces, reward peaked at the
top, episode over when the ball escapes the domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .control import AMPLITUDE_LIMIT, ControlAction, ControlObservation, CurrentWindowBatch
from .errors import TrajectoryAbort
from .hilbert import (
    DensityMatrix,
    DoubleWellParams,
    FeedbackKind,
    FockSpace,
    cat_state,
    coherent_state,
    double_well_hamiltonian,
    even_thermal_state,
    feedback_operator,
    ground_state,
    thermal_state,
)
from .seeding import spawn_generators
from .sme import POSITIVITY_CHECK_INTERVAL, SmeConfig, SmeIntegrator


class RewardKind(Enum):
    CURRENT = "current"
    FIDELITY = "fidelity"


class InitialStateKind(Enum):
    THERMAL = "thermal"
    COHERENT = "coherent"
    SMALL_CAT = "small_cat"
    EVEN_THERMAL = "even_thermal"
    GROUND = "ground"


class ObservationSource(Enum):
    CURRENT = "current"
    CONDITIONAL_MEAN = "conditional_mean"


@dataclass(frozen=True)
class InitialStateConfig:
    """Initial density matrix family; alpha defaults per kind when omitted."""

    kind: InitialStateKind = InitialStateKind.EVEN_THERMAL
    n_bar: float = 1.0
    alpha: float | None = None

    def __post_init__(self):
        if self.n_bar < 0:
            raise ValueError(f"n_bar must be >= 0, got {self.n_bar}")
        if self.alpha is not None and not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite")

    def resolved_alpha(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return 3.0 if self.kind is InitialStateKind.COHERENT else 1.0


@dataclass(frozen=True)
class EpisodeConfig:
    steps_per_episode: int = 1000
    reward_kind: RewardKind = RewardKind.CURRENT
    initial_state: InitialStateConfig = field(default_factory=InitialStateConfig)
    observation_window: int = 4
    observation_source: ObservationSource = ObservationSource.CURRENT
    normalize_observations: bool = False
    expose_internals: bool = False

    def __post_init__(self):
        if self.steps_per_episode < 1:
            raise ValueError(f"steps_per_episode must be >= 1, got {self.steps_per_episode}")
        if self.observation_window < 1:
            raise ValueError(f"observation_window must be >= 1, got {self.observation_window}")


@dataclass(frozen=True)
class StepResult:
    obs: ControlObservation
    reward: float
    done: bool
    info: dict


def build_initial_state(
    space: FockSpace, well: DoubleWellParams, spec: InitialStateConfig
) -> DensityMatrix:
    kind = spec.kind
    if kind is InitialStateKind.THERMAL:
        return thermal_state(space, spec.n_bar)
    if kind is InitialStateKind.EVEN_THERMAL:
        return even_thermal_state(space, spec.n_bar)
    if kind is InitialStateKind.COHERENT:
        return coherent_state(space, spec.resolved_alpha()).density()
    if kind is InitialStateKind.SMALL_CAT:
        return cat_state(space, spec.resolved_alpha()).density()
    if kind is InitialStateKind.GROUND:
        return ground_state(space, well).density()
    raise ValueError(f"unknown initial state kind {kind!r}")  # pragma: no cover


def reward_current(current: float, gain: float, b: float = 3.0) -> float:
    """Record-based reward -|I/gain - b^2|, maximal (zero) at the setpoint."""
    return -abs(current / gain - b * b)


def reward_fidelity(rho: DensityMatrix, target) -> float:
    from .hilbert import fidelity

    return fidelity(rho, target)


class VectorDoubleWellEnv:
    """n_envs independent double-well feedback environments in lockstep.

    All copies share one episode clock (fixed-length episodes), but carry
    independent conditional states and noise streams.  The integrator batch
    kernel advances every copy in a single call per control interval.
    """

    OBS_DIM = 2

    def __init__(
        self,
        space: FockSpace,
        well: DoubleWellParams,
        sme_cfg: SmeConfig,
        episode_cfg: EpisodeConfig,
        n_envs: int = 1,
        feedback_kind: FeedbackKind = FeedbackKind.XP_SYM,
        auto_reset: bool = False,
    ):
        self.space = space
        self.well = well
        self.sme_cfg = sme_cfg
        self.episode_cfg = episode_cfg
        self.n_envs = n_envs
        self.auto_reset = auto_reset
        self.integrator = SmeIntegrator(space, sme_cfg)
        self.h_dw = double_well_hamiltonian(space, well).matrix
        self.f_op = feedback_operator(feedback_kind, space).matrix
        self.target = ground_state(space, well)
        self._gvec = self.target.amplitudes
        self._rho0 = build_initial_state(space, well, episode_cfg.initial_state).matrix
        self._rhos: np.ndarray | None = None
        self._rngs: list[np.random.Generator] | None = None
        self._window: CurrentWindowBatch | None = None
        self._last_actions = np.zeros(n_envs)
        self._step_count = 0

    # -- episode control ---------------------------------------------------

    def reset(self, seed=None, rngs: Sequence[np.random.Generator] | None = None) -> np.ndarray:
        """Start fresh episodes on every copy; returns the (B, 2) observation."""
        if rngs is not None:
            if len(rngs) != self.n_envs:
                raise ValueError(f"need {self.n_envs} generators, got {len(rngs)}")
            self._rngs = list(rngs)
        else:
            self._rngs = spawn_generators(seed, self.n_envs)
        self._rhos = np.broadcast_to(
            self._rho0, (self.n_envs,) + self._rho0.shape
        ).copy()
        self._reset_members(np.arange(self.n_envs), keep_states=True)
        self._step_count = 0
        return self.observations()

    def _reset_members(self, idx: np.ndarray, keep_states: bool = False) -> None:
        if not keep_states:
            self._rhos[idx] = self._rho0
        x2 = self.integrator.expect_x2(self._rhos)
        primed = self.sme_cfg.measurement.gain * x2
        if self._window is None or len(idx) == self.n_envs:
            self._window = CurrentWindowBatch(primed, self.episode_cfg.observation_window)
            self._last_actions = np.zeros(self.n_envs)
        else:
            for values in self._window._values:
                values[idx] = primed[idx]
            self._last_actions[idx] = 0.0

    @property
    def steps_taken(self) -> int:
        return self._step_count

    @property
    def states(self) -> np.ndarray:
        return self._rhos

    def observations(self) -> np.ndarray:
        mean = self._window.mean()
        if self.episode_cfg.normalize_observations:
            gain = self.sme_cfg.measurement.gain
            b2 = self.well.b**2
            return np.stack(
                [(mean / gain - b2) / b2, self._last_actions / AMPLITUDE_LIMIT], axis=1
            )
        return np.stack([mean, self._last_actions], axis=1)

    def control_observations(self) -> list[ControlObservation]:
        """Typed per-copy observations for controller objects."""
        mean = self._window.mean()
        x2 = self.integrator.expect_x2(self._rhos)
        fids = self._fidelities()
        out = []
        for i in range(self.n_envs):
            kwargs = {}
            if self.episode_cfg.expose_internals:
                kwargs = {"expect_x2": float(x2[i]), "fidelity": float(fids[i])}
            out.append(
                ControlObservation(
                    current_mean4=float(mean[i]),
                    last_action=float(self._last_actions[i]),
                    **kwargs,
                )
            )
        return out

    def _fidelities(self) -> np.ndarray:
        return np.einsum("i,bij,j->b", self._gvec.conj(), self._rhos, self._gvec).real

    def step(self, amplitudes: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool, dict]:
        """Apply one action per copy for one control interval.

        Returns (observations, rewards, done, info); ``done`` is shared
        because episodes have a fixed common length.  A copy whose state
        becomes unusable is re-reset in place and the incident is counted in
        ``info['aborted']``.
        """
        if self._rhos is None:
            raise RuntimeError("step() before reset()")
        if self._step_count >= self.episode_cfg.steps_per_episode:
            raise RuntimeError(
                f"episode finished after {self.episode_cfg.steps_per_episode} steps; reset first"
            )
        amps = np.clip(np.asarray(amplitudes, dtype=float).reshape(self.n_envs),
                       -AMPLITUDE_LIMIT, AMPLITUDE_LIMIT)
        h_tot = self.h_dw[None, :, :] + amps[:, None, None] * self.f_op[None, :, :]
        dws = np.stack([self.integrator.draw_increments(rng) for rng in self._rngs])
        aborted = np.zeros(self.n_envs, dtype=bool)
        try:
            rhos, currents, x2_after = self.integrator.step_batch(self._rhos, h_tot, dws)
            if self._step_count % POSITIVITY_CHECK_INTERVAL == 0:
                self.integrator.check_positivity(rhos, step_index=self._step_count)
        except TrajectoryAbort:
            rhos, currents, x2_after, aborted = self._step_members_individually(h_tot, dws)
        self._rhos = rhos
        gain = self.sme_cfg.measurement.gain
        if self.episode_cfg.observation_source is ObservationSource.CONDITIONAL_MEAN:
            self._window.append(gain * x2_after)
        else:
            self._window.append(currents)
        self._last_actions = amps
        self._step_count += 1
        done = self._step_count >= self.episode_cfg.steps_per_episode
        fids = self._fidelities()
        if self.episode_cfg.reward_kind is RewardKind.CURRENT:
            rewards = -np.abs(currents / gain - self.well.b**2)
        else:
            rewards = fids.copy()
        info = {
            "fidelity": fids,
            "current": currents,
            "expect_x2": x2_after,
            "aborted": aborted,
        }
        if done and self.auto_reset:
            self.soft_reset()
        return self.observations(), rewards, done, info

    def soft_reset(self) -> np.ndarray:
        """Fresh episode on every copy, continuing the existing noise streams."""
        self._rhos = np.broadcast_to(self._rho0, (self.n_envs,) + self._rho0.shape).copy()
        self._reset_members(np.arange(self.n_envs), keep_states=True)
        self._step_count = 0
        return self.observations()

    def _step_members_individually(self, h_tot, dws):
        """Slow path after a batch abort: isolate and re-reset bad members."""
        rhos = np.empty_like(self._rhos)
        currents = np.zeros(self.n_envs)
        x2_after = np.zeros(self.n_envs)
        aborted = np.zeros(self.n_envs, dtype=bool)
        for i in range(self.n_envs):
            try:
                out, cur, x2 = self.integrator.step_batch(self._rhos[i], h_tot[i], dws[i])
                self.integrator.check_positivity(out[None, ...], step_index=self._step_count)
                rhos[i], currents[i], x2_after[i] = out, float(cur), float(x2)
            except TrajectoryAbort:
                aborted[i] = True
                rhos[i] = self._rho0
                x2_after[i] = float(
                    self.integrator.expect_x2(self._rho0[None, ...])[0]
                )
                currents[i] = self.sme_cfg.measurement.gain * x2_after[i]
        if aborted.any():
            idx = np.nonzero(aborted)[0]
            self._rhos = rhos
            self._reset_members(idx, keep_states=True)
        return rhos, currents, x2_after, aborted


class DoubleWellEnv:
    """Single-copy episodic environment (thin adapter over the vector env)."""

    def __init__(self, space, well, sme_cfg, episode_cfg, feedback_kind=FeedbackKind.XP_SYM):
        self._vec = VectorDoubleWellEnv(
            space, well, sme_cfg, episode_cfg, n_envs=1, feedback_kind=feedback_kind
        )

    @property
    def episode_cfg(self) -> EpisodeConfig:
        return self._vec.episode_cfg

    @property
    def target(self):
        return self._vec.target

    @property
    def state(self) -> DensityMatrix:
        return DensityMatrix(self._vec.states[0])

    def reset(self, seed=None, rng=None) -> ControlObservation:
        self._vec.reset(seed=seed, rngs=[rng] if rng is not None else None)
        return self._vec.control_observations()[0]

    def step(self, action: ControlAction | float) -> StepResult:
        amp = action.amplitude if isinstance(action, ControlAction) else float(action)
        obs_vec, rewards, done, info = self._vec.step(np.array([amp]))
        obs = self._vec.control_observations()[0]
        return StepResult(
            obs=obs,
            reward=float(rewards[0]),
            done=done,
            info={
                "fidelity": float(info["fidelity"][0]),
                "current": float(info["current"][0]),
                "expect_x2": float(info["expect_x2"][0]),
                "aborted": bool(info["aborted"][0]),
            },
        )


# --- classical inverted oscillator -------------------------------------------


@dataclass(frozen=True)
class ToyConfig:
    """Inverted-oscillator constants (one block, all invented for the demo)."""

    omega: float = 1.0
    forces: tuple[float, ...] = (-1.0, 0.0, 1.0)
    x_bound: float = 2.5
    horizon: int = 500
    dt: float = 0.01
    init_span: float = 0.05
    reward_scale: float = 0.11
    reward_floor: float = 0.01


class InvertedOscillatorEnv:
    """Ball on a frictionless hill: x'' = omega^2 x + F, discrete forces.

    Reward 0.11/(|x| + 0.01) peaks at the top; the episode ends at the
    horizon or when |x| leaves the domain.  Integrated with classic RK4.
    """

    OBS_DIM = 2

    def __init__(self, cfg: ToyConfig = ToyConfig()):
        self.cfg = cfg
        self._state: np.ndarray | None = None
        self._steps = 0
        self._rng: np.random.Generator | None = None

    def reset(self, seed=None, rng=None) -> np.ndarray:
        self._rng = rng if rng is not None else np.random.default_rng(seed)
        span = self.cfg.init_span
        self._state = self._rng.uniform(-span, span, size=2)
        self._steps = 0
        return self._state.copy()

    def _accel(self, x: float, force: float) -> float:
        return self.cfg.omega**2 * x + force

    def step(self, force_index: int) -> StepResult:
        if self._state is None:
            raise RuntimeError("step() before reset()")
        if not 0 <= int(force_index) < len(self.cfg.forces):
            raise ValueError(f"force index {force_index} outside the discrete set")
        force = self.cfg.forces[int(force_index)]
        x, v = self._state
        dt = self.cfg.dt
        # RK4 for (x, v)' = (v, omega^2 x + F)
        k1 = np.array([v, self._accel(x, force)])
        k2 = np.array([v + 0.5 * dt * k1[1], self._accel(x + 0.5 * dt * k1[0], force)])
        k3 = np.array([v + 0.5 * dt * k2[1], self._accel(x + 0.5 * dt * k2[0], force)])
        k4 = np.array([v + dt * k3[1], self._accel(x + dt * k3[0], force)])
        self._state = self._state + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        self._steps += 1
        x_new = float(self._state[0])
        reward = self.cfg.reward_scale / (abs(x_new) + self.cfg.reward_floor)
        done = self._steps >= self.cfg.horizon or abs(x_new) > self.cfg.x_bound
        return StepResult(obs=self._state.copy(), reward=reward, done=done, info={"x": x_new})

    def energy(self) -> float:
        x, v = self._state
        return 0.5 * v**2 - 0.5 * self.cfg.omega**2 * x**2


class ToyContinuousEnv:
    """Continuous-action adapter: thirds of [-5, 5] map to the force set."""

    OBS_DIM = 2

    def __init__(self, cfg: ToyConfig = ToyConfig()):
        self.inner = InvertedOscillatorEnv(cfg)
        n = len(cfg.forces)
        self._edges = np.linspace(-AMPLITUDE_LIMIT, AMPLITUDE_LIMIT, n + 1)[1:-1]

    def reset(self, seed=None, rng=None) -> np.ndarray:
        return self.inner.reset(seed=seed, rng=rng)

    def step(self, amplitude: float) -> StepResult:
        index = int(np.digitize(float(amplitude), self._edges))
        return self.inner.step(index)


class VectorToyEnv:
    """Synchronous batch of continuous-action toy environments.

    Members auto-reset individually when their episode terminates, so the
    trainer sees an uninterrupted stream; per-step ``done`` flags mark the
    boundaries for advantage estimation.
    """

    OBS_DIM = 2

    def __init__(self, cfg: ToyConfig, n_envs: int):
        self.cfg = cfg
        self.n_envs = n_envs
        self.envs = [ToyContinuousEnv(cfg) for _ in range(n_envs)]
        self._rngs: list[np.random.Generator] = []
        self._episode_returns = np.zeros(n_envs)
        self.finished_returns: list[float] = []

    def reset(self, seed=None, rngs=None) -> np.ndarray:
        if rngs is None:
            rngs = spawn_generators(seed, self.n_envs)
        self._rngs = list(rngs)
        self._episode_returns[:] = 0.0
        self.finished_returns = []
        return np.stack([env.reset(rng=rng) for env, rng in zip(self.envs, self._rngs)])

    def step(self, amplitudes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
        obs = np.empty((self.n_envs, self.OBS_DIM))
        rewards = np.empty(self.n_envs)
        dones = np.zeros(self.n_envs, dtype=bool)
        for i, env in enumerate(self.envs):
            result = env.step(float(amplitudes[i]))
            rewards[i] = result.reward
            dones[i] = result.done
            self._episode_returns[i] += result.reward
            if result.done:
                self.finished_returns.append(float(self._episode_returns[i]))
                self._episode_returns[i] = 0.0
                obs[i] = env.reset(rng=self._rngs[i])
            else:
                obs[i] = result.obs
        return obs, rewards, dones, {}
