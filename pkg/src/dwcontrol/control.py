"""Feedback controllers and closed-loop batch runners.

All controllers map a :class:`ControlObservation` to a squeezing amplitude
in [-5, 5].  The Bayesian controller implements proportional feedback on
the error between an x^2 estimate and the well-minima setpoint b^2; the
estimate is either the privileged conditional mean or the noisy measurement
record, matching the two benchmark regimes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError, TrajectoryAbort
from .hilbert import (
    DensityMatrix,
    DoubleWellParams,
    FeedbackKind,
    FockSpace,
    double_well_hamiltonian,
    feedback_operator,
    ground_state,
)
from .seeding import spawn_generators
from .sme import POSITIVITY_CHECK_INTERVAL, SmeConfig, SmeIntegrator

AMPLITUDE_LIMIT = 5.0


@dataclass(frozen=True)
class ControlObservation:
    """What a controller sees each control interval.

    ``expect_x2`` and ``fidelity`` are privileged simulator internals and
    are populated only when the run is configured to expose them.
    """

    current_mean4: float
    last_action: float
    expect_x2: float | None = None
    fidelity: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.current_mean4):
            raise ValueError(f"current_mean4 must be finite, got {self.current_mean4}")
        if abs(self.last_action) > AMPLITUDE_LIMIT + 1e-12:
            raise ValueError(f"last_action {self.last_action} outside [-5, 5]")


@dataclass(frozen=True)
class ControlAction:
    """Dimensionless squeezing strength, bounded to [-5, 5]."""

    amplitude: float

    def __post_init__(self):
        if not math.isfinite(self.amplitude) or abs(self.amplitude) > AMPLITUDE_LIMIT + 1e-12:
            raise ValueError(f"amplitude {self.amplitude} outside [-5, 5]")


class Controller(Protocol):
    def act(self, obs: ControlObservation, rng) -> ControlAction: ...


class EstimateSource(Enum):
    CONDITIONAL_MEAN = "conditional_mean"
    CURRENT = "current"


def clip_amplitude(value: float) -> float:
    return float(min(max(value, -AMPLITUDE_LIMIT), AMPLITUDE_LIMIT))


def bayesian_amplitude(estimate_x2: float, b: float, feedback_gain: float = 1.0) -> float:
    """Proportional feedback -gain*(estimate - b^2), clipped to [-5, 5]."""
    return clip_amplitude(-feedback_gain * (estimate_x2 - b * b))


class NullController:
    """Always emits zero amplitude (the no-feedback baseline)."""

    def act(self, obs: ControlObservation, rng) -> ControlAction:
        return ControlAction(0.0)


class RandomController:
    """Uniform amplitudes in [-5, 5]; reproducible through the caller's rng."""

    def act(self, obs: ControlObservation, rng) -> ControlAction:
        return ControlAction(float(rng.uniform(-AMPLITUDE_LIMIT, AMPLITUDE_LIMIT)))


@dataclass(frozen=True)
class BayesianController:
    """Setpoint feedback on the conditional mean or on the current record."""

    source: EstimateSource = EstimateSource.CONDITIONAL_MEAN
    b: float = 3.0
    record_gain: float = 1.0
    feedback_gain: float = 1.0

    def act(self, obs: ControlObservation, rng) -> ControlAction:
        if self.source is EstimateSource.CONDITIONAL_MEAN:
            if obs.expect_x2 is None:
                raise ConfigError(
                    "Bayesian conditional-mean controller needs the privileged "
                    "expect_x2 observation; configure the run to expose internals"
                )
            estimate = obs.expect_x2
        else:
            estimate = obs.current_mean4 / self.record_gain
        return ControlAction(bayesian_amplitude(estimate, self.b, self.feedback_gain))


@dataclass(frozen=True)
class MarkovianController:
    """Direct proportional feedback on the raw windowed record."""

    strength: float = 1.0
    b: float = 3.0
    record_gain: float = 1.0

    def act(self, obs: ControlObservation, rng) -> ControlAction:
        err = obs.current_mean4 / self.record_gain - self.b * self.b
        return ControlAction(clip_amplitude(-self.strength * err))


def controller_act(controller: Controller, obs: ControlObservation, rng) -> ControlAction:
    """Uniform dispatch: every controller's output is bounded to [-5, 5]."""
    action = controller.act(obs, rng)
    return ControlAction(clip_amplitude(action.amplitude))


class CurrentWindowBatch:
    """Rolling mean of the last <= window currents, one slot per batch member.

    Primed with a single value at reset so the first observation is defined;
    the primed entry ages out of the window like any real current.
    """

    def __init__(self, primed: np.ndarray, window: int):
        if window < 1:
            raise ValueError(f"observation window must be >= 1, got {window}")
        self.window = window
        self._values: list[np.ndarray] = [np.atleast_1d(np.asarray(primed, dtype=float)).copy()]

    def append(self, currents: np.ndarray) -> None:
        self._values.append(np.atleast_1d(np.asarray(currents, dtype=float)).copy())
        if len(self._values) > self.window:
            self._values.pop(0)

    def mean(self) -> np.ndarray:
        return np.mean(np.stack(self._values, axis=0), axis=0)

    def __len__(self) -> int:
        return len(self._values)


@dataclass
class BatchRunResult:
    """Per-copy, per-step logs of a batch of closed-loop trajectories."""

    fidelities: np.ndarray  # (B, T)
    currents: np.ndarray    # (B, T)
    actions: np.ndarray     # (B, T)
    expect_x2: np.ndarray   # (B, T)
    final_rhos: np.ndarray  # (B, d, d)

    @property
    def episode_mean_fidelities(self) -> np.ndarray:
        return self.fidelities.mean(axis=1)

    @property
    def mean_fidelity(self) -> float:
        return float(self.fidelities.mean())


def run_feedback_batch(
    space: FockSpace,
    dw_params: DoubleWellParams,
    cfg: SmeConfig,
    rho0s: np.ndarray,
    amplitude_fn,
    horizon: int,
    rngs: Sequence[np.random.Generator],
    feedback_kind: FeedbackKind = FeedbackKind.XP_SYM,
    window: int = 4,
) -> BatchRunResult:
    """Advance B trajectories in lockstep under a vectorized feedback law.

    ``amplitude_fn(step, current_means, expect_x2, last_actions) -> (B,)``
    supplies the amplitude for every copy at each control interval; copies
    use independent noise streams from ``rngs``.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    rho0s = np.asarray(rho0s, dtype=np.complex128)
    if rho0s.ndim != 3:
        raise ValueError(f"rho0s must be (B, d, d), got shape {rho0s.shape}")
    n_copies = rho0s.shape[0]
    if len(rngs) != n_copies:
        raise ValueError(f"need one rng per copy: {len(rngs)} rngs for {n_copies} copies")
    integrator = SmeIntegrator(space, cfg)
    h_dw = double_well_hamiltonian(space, dw_params).matrix
    f_op = feedback_operator(feedback_kind, space).matrix
    gvec = ground_state(space, dw_params).amplitudes
    gain = cfg.measurement.gain
    rhos = rho0s.copy()
    x2_now = integrator.expect_x2(rhos)
    window_buf = CurrentWindowBatch(gain * x2_now, window)
    last_actions = np.zeros(n_copies)
    fids = np.empty((n_copies, horizon))
    curs = np.empty((n_copies, horizon))
    acts = np.empty((n_copies, horizon))
    x2s = np.empty((n_copies, horizon))
    for step in range(horizon):
        amps = np.clip(
            np.asarray(amplitude_fn(step, window_buf.mean(), x2_now, last_actions), dtype=float),
            -AMPLITUDE_LIMIT,
            AMPLITUDE_LIMIT,
        )
        if amps.shape != (n_copies,):
            amps = np.broadcast_to(amps, (n_copies,)).astype(float)
        h_total = h_dw[None, :, :] + amps[:, None, None] * f_op[None, :, :]
        dws = np.stack([integrator.draw_increments(rng) for rng in rngs])
        try:
            rhos, currents, x2_now = integrator.step_batch(rhos, h_total, dws)
        except TrajectoryAbort as exc:
            raise TrajectoryAbort(f"{exc} (control step {step})", step_index=step) from None
        if step % POSITIVITY_CHECK_INTERVAL == 0 or step == horizon - 1:
            integrator.check_positivity(rhos, step_index=step)
        window_buf.append(currents)
        last_actions = amps
        fids[:, step] = np.einsum("i,bij,j->b", gvec.conj(), rhos, gvec).real
        curs[:, step] = currents
        acts[:, step] = amps
        x2s[:, step] = x2_now
    return BatchRunResult(fids, curs, acts, x2s, rhos)


def run_bayesian_batch(
    space: FockSpace,
    dw_params: DoubleWellParams,
    cfg: SmeConfig,
    rho0s: np.ndarray,
    source: EstimateSource,
    horizon: int,
    rngs: Sequence[np.random.Generator],
    feedback_gain: float = 1.0,
    window: int = 4,
) -> BatchRunResult:
    """Independent Bayesian feedback episodes advanced in lockstep."""
    b = dw_params.b
    gain = cfg.measurement.gain

    def amplitude_fn(step, current_means, expect_x2, last_actions):
        est = expect_x2 if source is EstimateSource.CONDITIONAL_MEAN else current_means / gain
        return -feedback_gain * (est - b * b)

    return run_feedback_batch(
        space, dw_params, cfg, rho0s, amplitude_fn, horizon, rngs, window=window
    )


def ensemble_bayesian_run(
    space: FockSpace,
    dw_params: DoubleWellParams,
    cfg: SmeConfig,
    initial: DensityMatrix,
    n_copies: int,
    horizon: int,
    seed,
    source: EstimateSource = EstimateSource.CURRENT,
    feedback_gain: float = 1.0,
) -> BatchRunResult:
    """Lockstep ensemble with one shared amplitude broadcast to all copies.

    Each control interval the amplitude is the Bayesian response to the
    ensemble mean of the per-copy estimates (record mean in CURRENT mode,
    conditional means in the privileged mode); with a single copy this
    degenerates to the plain Bayesian run.
    """
    if n_copies < 1:
        raise ValueError(f"n_copies must be >= 1, got {n_copies}")
    rho0s = np.broadcast_to(initial.matrix, (n_copies,) + initial.matrix.shape).copy()
    rngs = spawn_generators(seed, n_copies)
    b = dw_params.b
    gain = cfg.measurement.gain

    def amplitude_fn(step, current_means, expect_x2, last_actions):
        est = expect_x2 if source is EstimateSource.CONDITIONAL_MEAN else current_means / gain
        shared = bayesian_amplitude(float(np.mean(est)), b, feedback_gain)
        return np.full(n_copies, shared)

    return run_feedback_batch(
        space, dw_params, cfg, rho0s, amplitude_fn, horizon, rngs,
        window=1 if source is EstimateSource.CURRENT else 4,
    )
