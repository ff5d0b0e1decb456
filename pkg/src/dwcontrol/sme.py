"""Conditional stochastic master equation for continuous x^2 measurement.

The conditional state evolves under

    drho = -i[H, rho] dt + D[c] rho dt + sum_k D[L_k] rho dt
           + sqrt(eta) * Hsup[c] rho dW,        c = sqrt(Gamma) x^2,

integrated with fully split, positivity-preserving substeps:

* the Hamiltonian advances by its exact unitary (one batched
  eigendecomposition per control interval),
* the monitored channel advances by the exact Gaussian Kraus factor
  K = exp(sqrt(eta) c dW - eta c^2 dt / 2), the finite-step form of the
  measurement backaction (the same family as :func:`weak_measure`),
* inefficient-detection and decoherence remainders advance by a sandwich
  term plus the exact decay factor exp(-((1-eta) c^2 + sum L^dag L) dt / 2).

Every factor is completely positive, so the state stays a density matrix
for any step size; explicit Euler-Maruyama updates of the same equation
amplify truncation-edge modes exponentially at useful step sizes and were
rejected (see the integrator notes).  The measurement record averaged over
one control interval is

    I = gain * ( <x^2>_c  +  dW_total / (sqrt(4*eta*Gamma) * dt_control) ),

with <x^2>_c evaluated at the start of the interval and dW_total the sum of
the very same Wiener increments that drove the state, so the record and the
conditional state are consistent for filtering.

Also provided: the unconditional Lindblad generator, the Markovian
direct-feedback master equation, a Liouvillian/steady-state solver for the
feedback-vs-measurement decoherence analysis, and the discrete
Gaussian-Kraus weak measurement model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DimensionMismatchError, TrajectoryAbort
from .hilbert import (
    DensityMatrix,
    DoubleWellParams,
    FeedbackKind,
    FockSpace,
    Operator,
    double_well_hamiltonian,
    feedback_operator,
    ground_state,
    ladder_operators,
    quadratures,
)

POSITIVITY_ABORT_TOL = 1e-4
POSITIVITY_CHECK_INTERVAL = 10  # control steps between batched Cholesky probes


class ChannelKind(Enum):
    NONE = "none"
    DAMPING = "damping"      # L = sqrt(rate) * a
    DEPHASING = "dephasing"  # L = sqrt(rate) * a^dag a


@dataclass(frozen=True)
class MeasurementConfig:
    """Continuous-measurement parameters: rate, efficiency, record gain."""

    gamma_meas: float = 0.1
    eta: float = 1.0
    gain: float = 1.0

    def __post_init__(self):
        if not self.gamma_meas > 0:
            raise ValueError(f"measurement rate must be positive, got {self.gamma_meas}")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"efficiency must lie in (0, 1], got {self.eta}")
        if not self.gain > 0:
            raise ValueError(f"record gain must be positive, got {self.gain}")


@dataclass(frozen=True)
class DecoherenceChannel:
    kind: ChannelKind = ChannelKind.NONE
    rate: float = 0.0

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError(f"decoherence rate must be >= 0, got {self.rate}")
        if (self.rate == 0.0) != (self.kind is ChannelKind.NONE):
            raise ValueError("rate must be 0 exactly when kind is NONE")


@dataclass(frozen=True)
class SmeConfig:
    measurement: MeasurementConfig = field(default_factory=MeasurementConfig)
    channels: tuple[DecoherenceChannel, ...] = ()
    dt_control: float = 0.01
    n_substeps: int = 10
    renormalize: bool = True

    def __post_init__(self):
        if not self.dt_control > 0:
            raise ValueError(f"dt_control must be positive, got {self.dt_control}")
        if self.n_substeps < 1:
            raise ValueError(f"n_substeps must be >= 1, got {self.n_substeps}")
        dt_sub = self.dt_control / self.n_substeps
        if self.measurement.gamma_meas >= 0.1 and dt_sub > 1e-2 + 1e-15:
            raise ValueError(
                f"inner step {dt_sub:.3e} too coarse for gamma_meas >= 0.1 "
                "(requires dt_control/n_substeps <= 1e-2)"
            )

    @property
    def dt_substep(self) -> float:
        return self.dt_control / self.n_substeps


@dataclass(frozen=True)
class StepRecord:
    """Outcome of one control interval of the conditional evolution."""

    current: float
    dW_sum: float
    rho_after: DensityMatrix
    expect_x2: float


def _mat(op) -> np.ndarray:
    return op.matrix if isinstance(op, Operator) else np.asarray(op, dtype=np.complex128)


def _dag(m: np.ndarray) -> np.ndarray:
    return m.conj().swapaxes(-1, -2)


def _btrace(m: np.ndarray) -> np.ndarray:
    return np.einsum("...ii->...", m)


def dissipator(L, rho) -> np.ndarray:
    """Lindblad dissipator D[L] rho = L rho L^dag - {L^dag L, rho}/2."""
    lm = _mat(L)
    rm = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho, np.complex128)
    if lm.shape[-1] != rm.shape[-1]:
        raise DimensionMismatchError(f"operator dim {lm.shape[-1]} != state dim {rm.shape[-1]}")
    ldl = _dag(lm) @ lm
    return lm @ rm @ _dag(lm) - 0.5 * (ldl @ rm + rm @ ldl)


def innovation(L, rho) -> np.ndarray:
    """Measurement-backaction superoperator L rho + rho L - tr(L rho + rho L) rho.

    Only defined for hermitian L; the trace subtraction keeps the output
    traceless and makes eigenprojectors of L fixed points.
    """
    if isinstance(L, Operator):
        if not L.hermitian:
            raise ValueError("innovation requires a hermitian measurement operator")
        lm = L.matrix
    else:
        lm = np.asarray(L, dtype=np.complex128)
        if np.abs(lm - lm.conj().T).max() > 1e-10 * max(np.abs(lm).max(), 1.0):
            raise ValueError("innovation requires a hermitian measurement operator")
    rm = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho, np.complex128)
    if lm.shape[-1] != rm.shape[-1]:
        raise DimensionMismatchError(f"operator dim {lm.shape[-1]} != state dim {rm.shape[-1]}")
    s = lm @ rm + rm @ lm
    return s - np.trace(s) * rm


def lindblad_rhs(rho, H, collapse_list) -> np.ndarray:
    """Unconditional generator -i[H, rho] + sum_k D[L_k] rho."""
    hm = _mat(H)
    rm = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho, np.complex128)
    if hm.shape[-1] != rm.shape[-1]:
        raise DimensionMismatchError(f"operator dim {hm.shape[-1]} != state dim {rm.shape[-1]}")
    out = -1j * (hm @ rm - rm @ hm)
    for L in collapse_list:
        out = out + dissipator(L, rm)
    return out


def wiseman_milburn_rhs(rho, H, A_meas, F, gamma_meas: float) -> np.ndarray:
    """Unconditional master equation under instantaneous current feedback.

    rho_dot = -i[H, rho] + Gamma D[A] rho - i sqrt(Gamma) [F, A rho + rho A]
              + D[F] rho.
    The feedback operator decoheres the state on its own (the D[F] term),
    which competes with the measurement decoherence Gamma D[A].
    """
    for name, op in (("A_meas", A_meas), ("F", F)):
        m = _mat(op)
        if np.abs(m - m.conj().T).max() > 1e-10 * max(np.abs(m).max(), 1.0):
            raise ValueError(f"{name} must be hermitian")
    hm, am, fm = _mat(H), _mat(A_meas), _mat(F)
    rm = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho, np.complex128)
    if not (hm.shape[-1] == am.shape[-1] == fm.shape[-1] == rm.shape[-1]):
        raise DimensionMismatchError("H, A, F and rho must share one dimension")
    s = am @ rm + rm @ am
    out = -1j * (hm @ rm - rm @ hm)
    out = out + gamma_meas * dissipator(am, rm)
    out = out - 1j * math.sqrt(gamma_meas) * (fm @ s - s @ fm)
    out = out + dissipator(fm, rm)
    return out


def liouvillian_matrix(H, collapse_list, feedback: tuple | None = None) -> np.ndarray:
    """Dense generator acting on row-major vectorized density matrices.

    ``feedback=(A, F, gamma)`` adds every Markovian direct-feedback term of
    :func:`wiseman_milburn_rhs` (gamma*D[A], the feedback cross term, and
    D[F]); in that case neither A nor F should appear in ``collapse_list``.
    """
    hm = _mat(H)
    d = hm.shape[0]
    eye = np.eye(d)
    sup = -1j * (np.kron(hm, eye) - np.kron(eye, hm.T))
    for L in collapse_list:
        lm = _mat(L)
        ldl = _dag(lm) @ lm
        sup += np.kron(lm, lm.conj())
        sup -= 0.5 * (np.kron(ldl, eye) + np.kron(eye, ldl.T))
    if feedback is not None:
        am, fm, gamma = _mat(feedback[0]), _mat(feedback[1]), feedback[2]
        ldl = am @ am
        sup += gamma * (np.kron(am, am.conj()) - 0.5 * (np.kron(ldl, eye) + np.kron(eye, ldl.T)))
        sup += -1j * math.sqrt(gamma) * (
            np.kron(fm @ am, eye)
            + np.kron(fm, am.T)
            - np.kron(am, fm.T)
            - np.kron(eye, (am @ fm).T)
        )
        fdf = fm @ fm
        sup += np.kron(fm, fm.conj()) - 0.5 * (np.kron(fdf, eye) + np.kron(eye, fdf.T))
    return sup


def steady_state(liouvillian: np.ndarray) -> DensityMatrix:
    """Least-squares null vector of the generator, trace-normalized."""
    n2 = liouvillian.shape[0]
    d = int(round(math.sqrt(n2)))
    trace_row = np.eye(d).reshape(1, -1).astype(np.complex128)
    lhs = np.vstack([liouvillian, trace_row])
    rhs = np.zeros(n2 + 1, dtype=np.complex128)
    rhs[-1] = 1.0
    sol, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    rho = sol.reshape(d, d)
    rho = 0.5 * (rho + rho.conj().T)
    rho = rho / np.trace(rho).real
    return DensityMatrix(rho)


def weak_measure(rho: DensityMatrix, A_meas, g: float, sigma: float, rng) -> tuple[float, DensityMatrix]:
    """One discrete Gaussian weak measurement of a hermitian observable.

    The Kraus operator is (2*pi*sigma)^(-1/4) exp(-(z - g*A)^2 / (4*sigma)),
    so outcomes follow the Gaussian mixture over A's spectrum with
    E[z] = g<A> and V[z] = g^2<dA^2> + sigma, and eigenstates of A suffer no
    backaction.
    """
    if sigma <= 0:
        raise ValueError(f"measurement error sigma must be positive, got {sigma}")
    am = _mat(A_meas)
    if isinstance(A_meas, Operator) and not A_meas.hermitian:
        raise ValueError("weak measurement requires a hermitian observable")
    if am.shape[0] != rho.dim:
        raise DimensionMismatchError(f"operator dim {am.shape[0]} != state dim {rho.dim}")
    evals, evecs = np.linalg.eigh(am)
    rho_eig = evecs.conj().T @ rho.matrix @ evecs
    weights = np.clip(np.diag(rho_eig).real, 0.0, None)
    weights = weights / weights.sum()
    comp = rng.choice(evals.size, p=weights)
    z = float(rng.normal(g * evals[comp], math.sqrt(sigma)))
    # Kraus update in the eigenbasis, with the largest exponent factored out
    # so the weight normalization cannot underflow.
    expo = -((z - g * evals) ** 2) / (4.0 * sigma)
    kraus = np.exp(expo - expo.max())
    post = kraus[:, None] * rho_eig * kraus[None, :]
    post /= np.trace(post).real
    post = evecs @ post @ evecs.conj().T
    post = 0.5 * (post + post.conj().T)
    return z, DensityMatrix(post / np.trace(post).real)


class SmeIntegrator:
    """Split-step, completely positive integrator for one truncated space.

    Works in the eigenbasis of the measured observable inside each control
    interval: there the Gaussian Kraus factor and the inefficiency sandwich
    are elementwise, so a substep costs two batched matrix products.  Only
    the Hamiltonian changes between control intervals and is exponentiated
    exactly through one (batched) eigendecomposition.  All stepping methods
    accept a leading batch axis.
    """

    def __init__(self, space: FockSpace, cfg: SmeConfig):
        self.space = space
        self.cfg = cfg
        x, _ = quadratures(space)
        self.x2 = np.ascontiguousarray(x.matrix @ x.matrix)
        self.c = math.sqrt(cfg.measurement.gamma_meas) * self.x2
        eta = cfg.measurement.eta
        dt = cfg.dt_substep
        # Eigenbasis of c (and x^2): the working basis within an interval.
        gammas, q = np.linalg.eigh(self.c)
        self._gammas = gammas
        self._q = np.ascontiguousarray(q)
        self._q_dag = np.ascontiguousarray(q.conj().T)
        self.x2_diag = gammas / math.sqrt(cfg.measurement.gamma_meas)
        # Decay generator for everything not covered by the Kraus factor.
        resid = -0.5 * (1.0 - eta) * (self.c @ self.c)
        ops = []
        a, adag = ladder_operators(space)
        for ch in cfg.channels:
            if ch.kind is ChannelKind.NONE:
                continue
            if ch.kind is ChannelKind.DAMPING:
                lm = math.sqrt(ch.rate) * a.matrix
            elif ch.kind is ChannelKind.DEPHASING:
                lm = math.sqrt(ch.rate) * (adag.matrix @ a.matrix)
            else:  # pragma: no cover - exhaustive enum
                raise ValueError(f"unknown channel kind {ch.kind!r}")
            lq = self._q_dag @ lm @ self._q
            ops.append((np.ascontiguousarray(lq), np.ascontiguousarray(lq.conj().T)))
            resid = resid - 0.5 * (lm.conj().T @ lm)
        self.channel_ops_q = tuple(ops)
        self._has_resid = bool(ops) or eta < 1.0
        if self._has_resid:
            evals, evecs = np.linalg.eigh(resid)
            decay = (evecs * np.exp(evals * dt)[None, :]) @ evecs.conj().T
            self._decay = np.ascontiguousarray(decay)
        else:
            self._decay = None
        self._sqrt_eta = math.sqrt(eta)
        self._one_minus_eta_dt = (1.0 - eta) * dt
        self._noise_to_current = 1.0 / (
            math.sqrt(4.0 * eta * cfg.measurement.gamma_meas) * cfg.dt_control
        )

    @property
    def dim(self) -> int:
        return self.space.dim

    def collapse_operators(self) -> list[np.ndarray]:
        """Measurement plus decoherence collapse operators (for Lindblad oracles)."""
        out = [self.c]
        for lq, _ in self.channel_ops_q:
            out.append(self._q @ lq @ self._q_dag)
        return out

    def expect_x2(self, rhos: np.ndarray) -> np.ndarray:
        return np.einsum("ij,...ji->...", self.x2, rhos).real

    def draw_increments(self, rng, size: int | None = None) -> np.ndarray:
        n = self.cfg.n_substeps if size is None else size
        return rng.normal(0.0, math.sqrt(self.cfg.dt_substep), n)

    def step_batch(
        self, rhos: np.ndarray, h_total: np.ndarray, dws: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Advance a batch one control interval.

        Parameters
        ----------
        rhos : (B, d, d) or (d, d) complex array
        h_total : hermitian Hamiltonian, broadcastable against ``rhos``
        dws : (B, n_substeps) or (n_substeps,) Wiener increments, variance
            dt_substep each; the same increments feed the state update and
            the returned record.

        Returns
        -------
        (rhos_after, currents, expect_x2_after)
        """
        cfg = self.cfg
        x2_start = self.expect_x2(rhos)
        dt = cfg.dt_substep
        dws = np.asarray(dws)
        # Exact unitary for the Hamiltonian substep, with the exact residual
        # decay folded in, expressed in the measurement eigenbasis.
        energies, vecs = np.linalg.eigh(np.asarray(h_total, dtype=np.complex128))
        phases = np.exp(-1j * dt * energies)
        unitary = (vecs * phases[..., None, :]) @ _dag(vecs)
        if self._decay is not None:
            prop = self._decay @ unitary
        else:
            prop = unitary
        prop_q = (self._q_dag @ prop) @ self._q
        prop_q_dag = _dag(prop_q)
        rhos_q = (self._q_dag @ rhos) @ self._q
        gam = self._gammas
        kraus_det = -0.5 * cfg.measurement.eta * gam * gam * dt
        for k in range(cfg.n_substeps):
            kvec = np.exp(self._sqrt_eta * dws[..., k, None] * gam + kraus_det)
            n_mat = rhos_q * (kvec[..., :, None] * kvec[..., None, :])
            if self._one_minus_eta_dt > 0.0:
                n_mat = n_mat + self._one_minus_eta_dt * (
                    rhos_q * (gam[:, None] * gam[None, :])
                )
            for lq, lq_dag in self.channel_ops_q:
                n_mat = n_mat + dt * ((lq @ rhos_q) @ lq_dag)
            rhos_q = (prop_q @ n_mat) @ prop_q_dag
            rhos_q = 0.5 * (rhos_q + _dag(rhos_q))
            if cfg.renormalize:
                rhos_q = rhos_q / _btrace(rhos_q).real[..., None, None]
        rhos = (self._q @ rhos_q) @ self._q_dag
        rhos = 0.5 * (rhos + _dag(rhos))
        if not np.all(np.isfinite(rhos)):
            raise TrajectoryAbort("non-finite entries in conditional state")
        dw_tot = dws.sum(axis=-1)
        currents = cfg.measurement.gain * (x2_start + dw_tot * self._noise_to_current)
        return rhos, currents, self.expect_x2(rhos)

    def step(self, rho: DensityMatrix, h_total, rng=None, dws=None) -> StepRecord:
        """One control interval for a single trajectory (public contract).

        Draws the substep increments from ``rng`` unless ``dws`` is given
        explicitly (used by the deterministic-limit checks).  Aborts on
        non-finite entries or positivity violation beyond -1e-4.
        """
        if dws is None:
            if rng is None:
                raise ValueError("either rng or explicit increments are required")
            dws = self.draw_increments(rng)
        hm = _mat(h_total)
        if hm.shape[0] != rho.dim or rho.dim != self.dim:
            raise DimensionMismatchError(
                f"state dim {rho.dim}, H dim {hm.shape[0]}, integrator dim {self.dim}"
            )
        out, currents, x2_after = self.step_batch(rho.matrix, hm, np.asarray(dws))
        self.check_positivity(out[None, ...])
        return StepRecord(
            current=float(currents),
            dW_sum=float(np.sum(dws)),
            rho_after=DensityMatrix(out),
            expect_x2=float(x2_after),
        )

    def check_positivity(self, rhos: np.ndarray, step_index: int | None = None) -> None:
        """Abort if any batch member dips below -POSITIVITY_ABORT_TOL."""
        shifted = rhos + POSITIVITY_ABORT_TOL * np.eye(self.dim)
        try:
            np.linalg.cholesky(shifted)
        except np.linalg.LinAlgError:
            worst = np.inf
            which = -1
            flat = rhos.reshape(-1, self.dim, self.dim)
            for i, r in enumerate(flat):
                low = float(np.linalg.eigvalsh(r)[0])
                if low < worst:
                    worst, which = low, i
            raise TrajectoryAbort(
                f"positivity violation: min eigenvalue {worst:.3e} in batch member "
                f"{which}" + (f" at step {step_index}" if step_index is not None else ""),
                step_index=step_index,
            ) from None


@dataclass
class TrajectoryRecord:
    """Per-step logs of one closed-loop trajectory."""

    currents: np.ndarray
    actions: np.ndarray
    fidelities: np.ndarray
    expect_x2: np.ndarray
    final_rho: DensityMatrix

    @property
    def mean_fidelity(self) -> float:
        return float(self.fidelities.mean())


def evolve_trajectory(
    space: FockSpace,
    rho0: DensityMatrix,
    controller,
    dw_params: DoubleWellParams,
    cfg: SmeConfig,
    horizon_steps: int,
    rng,
    feedback_kind: FeedbackKind = FeedbackKind.XP_SYM,
) -> TrajectoryRecord:
    """Closed-loop conditional evolution under a feedback controller.

    Each control interval the controller maps the running observation
    (windowed current mean, previous action, and the privileged conditional
    moments) to a squeezing amplitude applied through the feedback
    generator.  Logs current, action, ground-state fidelity and <x^2>_c per
    step.
    """
    from .control import ControlObservation  # local import: controllers consume sme records

    if horizon_steps < 1:
        raise ValueError(f"horizon_steps must be >= 1, got {horizon_steps}")
    if rho0.dim != space.dim:
        raise DimensionMismatchError(f"rho dim {rho0.dim} != space dim {space.dim}")
    integrator = SmeIntegrator(space, cfg)
    h_dw = double_well_hamiltonian(space, dw_params).matrix
    f_op = feedback_operator(feedback_kind, space).matrix
    target = ground_state(space, dw_params)
    gvec = target.amplitudes
    window: list[float] = [cfg.measurement.gain * float(integrator.expect_x2(rho0.matrix))]
    obs_window = 4
    rho = rho0.matrix
    last_action = 0.0
    currents = np.empty(horizon_steps)
    actions = np.empty(horizon_steps)
    fidelities = np.empty(horizon_steps)
    x2s = np.empty(horizon_steps)
    x2_now = float(integrator.expect_x2(rho))
    for step in range(horizon_steps):
        obs = ControlObservation(
            current_mean4=float(np.mean(window)),
            last_action=last_action,
            expect_x2=x2_now,
            fidelity=float((gvec.conj() @ rho @ gvec).real),
        )
        action = controller.act(obs, rng)
        amp = action.amplitude
        h_total = h_dw + amp * f_op
        dws = integrator.draw_increments(rng)
        try:
            rho, current, x2_now = integrator.step_batch(rho, h_total, dws)
        except TrajectoryAbort as exc:
            raise TrajectoryAbort(f"{exc} (control step {step})", step_index=step) from None
        if step % POSITIVITY_CHECK_INTERVAL == 0 or step == horizon_steps - 1:
            integrator.check_positivity(rho[None, ...], step_index=step)
        current = float(current)
        x2_now = float(x2_now)
        window.append(current)
        if len(window) > obs_window:
            window.pop(0)
        last_action = amp
        currents[step] = current
        actions[step] = amp
        fidelities[step] = (gvec.conj() @ rho @ gvec).real
        x2s[step] = x2_now
    return TrajectoryRecord(currents, actions, fidelities, x2s, DensityMatrix(rho))
