"""Operators and states of the double-well problem in a truncated Fock basis.

Everything here is a dense complex matrix over the number-state basis of a
harmonic oscillator, truncated at ``dim`` levels.  The canonical pair is
scaled so that ``[x, p] = i*kbar`` with a configurable dimensionless Planck
constant ``kbar``; truncation corrupts the commutator only in the last basis
state.  All returned arrays are frozen (non-writeable) so values can be
shared freely between concurrent trajectory workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np

from .errors import DimensionMismatchError, EmptySectorError

HERMITICITY_RTOL = 1e-12
TRACE_ATOL = 1e-9
STATE_NORM_ATOL = 1e-12
POSITIVITY_ATOL = 1e-7


def _frozen(array: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(array)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class FockSpace:
    """Truncated Fock space: dimension and dimensionless Planck constant."""

    dim: int
    kbar: float = 1.0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if not self.kbar > 0:
            raise ValueError(f"kbar must be positive, got {self.kbar}")


@dataclass(frozen=True)
class Operator:
    """Dense operator on a truncated Fock space.

    The ``hermitian`` flag is a promise checked at construction time:
    ``max|M - M^dag| <= 1e-12 * max|M|``.
    """

    matrix: np.ndarray
    hermitian: bool = False

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.complex128)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"operator matrix must be square, got shape {m.shape}")
        if self.hermitian:
            scale = max(np.abs(m).max(), 1.0)
            dev = np.abs(m - m.conj().T).max()
            if dev > HERMITICITY_RTOL * scale:
                raise ValueError(
                    f"matrix flagged hermitian deviates by {dev:.3e} "
                    f"(allowed {HERMITICITY_RTOL * scale:.3e})"
                )
        object.__setattr__(self, "matrix", _frozen(m))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class PureState:
    """Unit-norm state vector in the truncated basis."""

    amplitudes: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.amplitudes, dtype=np.complex128)
        if v.ndim != 1:
            raise ValueError(f"amplitudes must be a vector, got shape {v.shape}")
        norm = float(np.linalg.norm(v))
        if abs(norm - 1.0) > STATE_NORM_ATOL:
            raise ValueError(f"state norm {norm!r} deviates from 1 beyond {STATE_NORM_ATOL}")
        object.__setattr__(self, "amplitudes", _frozen(v))

    @property
    def dim(self) -> int:
        return self.amplitudes.shape[0]

    def density(self) -> "DensityMatrix":
        return DensityMatrix(np.outer(self.amplitudes, self.amplitudes.conj()))


@dataclass(frozen=True)
class DensityMatrix:
    """Hermitian, unit-trace density matrix (positivity within tolerance).

    Trace and hermiticity are validated on construction; the (more costly)
    eigenvalue positivity check is available via :meth:`min_eigenvalue` and
    is asserted by the integrators at their own cadence.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.complex128)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"density matrix must be square, got shape {m.shape}")
        tr = complex(np.trace(m))
        if abs(tr - 1.0) > TRACE_ATOL:
            raise ValueError(f"trace {tr!r} deviates from 1 beyond {TRACE_ATOL}")
        if np.abs(m - m.conj().T).max() > TRACE_ATOL:
            raise ValueError("density matrix is not hermitian to 1e-9")
        object.__setattr__(self, "matrix", _frozen(m))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix)[0])

    def expectation(self, op: Operator | np.ndarray) -> float:
        """Real expectation value of a hermitian operator."""
        m = op.matrix if isinstance(op, Operator) else op
        if m.shape[0] != self.dim:
            raise DimensionMismatchError(f"operator dim {m.shape[0]} != state dim {self.dim}")
        return float(np.trace(m @ self.matrix).real)

    def purity(self) -> float:
        return float(np.trace(self.matrix @ self.matrix).real)


@dataclass(frozen=True)
class DoubleWellParams:
    """Quartic double-well parameters: offset, minima location, barrier height."""

    a_offset: float = 0.0
    b: float = 3.0
    h: float = 5.0

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError(f"well minima location b must be positive, got {self.b}")
        if not self.h > 0:
            raise ValueError(f"barrier height h must be positive, got {self.h}")


class FeedbackKind(Enum):
    """Hermitian generators available as the modulated feedback term."""

    XP_SYM = "xp_sym"
    X_SQUARED = "x_squared"
    P2_MINUS_X2 = "p2_minus_x2"


@lru_cache(maxsize=64)
def _ladder_matrices(dim: int) -> tuple[np.ndarray, np.ndarray]:
    a = np.zeros((dim, dim), dtype=np.complex128)
    ns = np.arange(1, dim)
    a[ns - 1, ns] = np.sqrt(ns)
    return _frozen(a), _frozen(a.conj().T)


def ladder_operators(space: FockSpace) -> tuple[Operator, Operator]:
    """Annihilation and creation operators: ``a[n-1, n] = sqrt(n)``."""
    a, adag = _ladder_matrices(space.dim)
    return Operator(a), Operator(adag)


@lru_cache(maxsize=64)
def _quadrature_matrices(dim: int, kbar: float) -> tuple[np.ndarray, np.ndarray]:
    a, adag = _ladder_matrices(dim)
    s = math.sqrt(kbar / 2.0)
    x = s * (a + adag)
    p = 1j * s * (adag - a)
    return _frozen(x), _frozen(p)


def quadratures(space: FockSpace) -> tuple[Operator, Operator]:
    """Position and momentum with ``[x, p] = i*kbar`` on the interior block."""
    x, p = _quadrature_matrices(space.dim, space.kbar)
    return Operator(x, hermitian=True), Operator(p, hermitian=True)


def double_well_hamiltonian(space: FockSpace, params: DoubleWellParams) -> Operator:
    """Kinetic term plus symmetric quartic well: p^2/2 + (h/b^4)((x-a)^2 - b^2)^2."""
    x, p = _quadrature_matrices(space.dim, space.kbar)
    eye = np.eye(space.dim)
    shifted = x - params.a_offset * eye
    well = shifted @ shifted - params.b**2 * eye
    h = 0.5 * (p @ p) + (params.h / params.b**4) * (well @ well)
    h = 0.5 * (h + h.conj().T)
    return Operator(h, hermitian=True)


def feedback_operator(kind: FeedbackKind, space: FockSpace) -> Operator:
    """One of the three candidate feedback generators, always hermitian."""
    x, p = _quadrature_matrices(space.dim, space.kbar)
    if kind is FeedbackKind.XP_SYM:
        m = x @ p + p @ x
    elif kind is FeedbackKind.X_SQUARED:
        m = x @ x
    elif kind is FeedbackKind.P2_MINUS_X2:
        m = p @ p - x @ x
    else:  # pragma: no cover - exhaustive enum
        raise ValueError(f"unknown feedback kind {kind!r}")
    m = 0.5 * (m + m.conj().T)
    return Operator(m, hermitian=True)


@lru_cache(maxsize=64)
def _parity_diagonal(dim: int) -> np.ndarray:
    return _frozen(np.where(np.arange(dim) % 2 == 0, 1.0, -1.0))


def parity_operator(space: FockSpace) -> Operator:
    """Fock-basis parity, diag((-1)^n)."""
    return Operator(np.diag(_parity_diagonal(space.dim)).astype(np.complex128), hermitian=True)


class ParitySector(Enum):
    EVEN = 1
    ODD = -1


def parity_project(state, sector: ParitySector):
    """Project a pure state or density matrix onto one parity sector.

    The projected object is renormalized; projecting onto a sector that
    carries less than 1e-12 of the weight raises :class:`EmptySectorError`.
    """
    if isinstance(state, PureState):
        signs = _parity_diagonal(state.dim)
        mask = signs == sector.value
        projected = np.where(mask, state.amplitudes, 0.0)
        norm = float(np.linalg.norm(projected))
        if norm**2 < 1e-12:
            raise EmptySectorError(f"state has weight {norm**2:.3e} in {sector.name} sector")
        return PureState(projected / norm)
    if isinstance(state, DensityMatrix):
        signs = _parity_diagonal(state.dim)
        mask = signs == sector.value
        projected = np.where(np.outer(mask, mask), state.matrix, 0.0)
        weight = float(np.trace(projected).real)
        if weight < 1e-12:
            raise EmptySectorError(f"state has weight {weight:.3e} in {sector.name} sector")
        return DensityMatrix(projected / weight)
    raise TypeError(f"expected PureState or DensityMatrix, got {type(state).__name__}")


def parity_expectation(state) -> float:
    signs = _parity_diagonal(state.dim)
    if isinstance(state, PureState):
        return float(np.sum(signs * np.abs(state.amplitudes) ** 2))
    return float(np.sum(signs * np.diag(state.matrix).real))


def odd_sector_population(rho: DensityMatrix | np.ndarray) -> float:
    m = rho.matrix if isinstance(rho, DensityMatrix) else rho
    pops = np.diagonal(m, axis1=-2, axis2=-1).real
    return float(np.max(np.sum(pops[..., 1::2], axis=-1)))


def spectrum(H: Operator, n_lowest: int) -> list[tuple[float, PureState]]:
    """Lowest eigenpairs of a hermitian operator, sorted by energy.

    When ``H`` commutes with Fock parity the even and odd blocks are
    diagonalized separately, so every returned eigenvector is an exact
    parity eigenstate even inside near-degenerate tunneling doublets; a
    doublet degenerate below 1e-10 is ordered even-first.
    """
    if not H.hermitian:
        raise ValueError("spectrum requires an operator flagged hermitian")
    dim = H.dim
    if not 1 <= n_lowest <= dim:
        raise ValueError(f"n_lowest must be in [1, {dim}], got {n_lowest}")
    m = H.matrix
    signs = _parity_diagonal(dim)
    commutes = np.abs(m * (signs[:, None] - signs[None, :])).max() <= 1e-12 * max(
        np.abs(m).max(), 1.0
    )
    pairs: list[tuple[float, np.ndarray]] = []
    if commutes:
        for sector in (1.0, -1.0):
            idx = np.nonzero(signs == sector)[0]
            vals, vecs = np.linalg.eigh(m[np.ix_(idx, idx)])
            for k in range(len(idx)):
                full = np.zeros(dim, dtype=np.complex128)
                full[idx] = vecs[:, k]
                pairs.append((float(vals[k]), full))
        pairs.sort(key=lambda ev: ev[0])
        for i in range(len(pairs) - 1):
            near = abs(pairs[i + 1][0] - pairs[i][0]) < 1e-10
            if near and parity_of_vector(pairs[i][1]) < parity_of_vector(pairs[i + 1][1]):
                pairs[i], pairs[i + 1] = pairs[i + 1], pairs[i]
    else:
        vals, vecs = np.linalg.eigh(m)
        pairs = [(float(vals[k]), vecs[:, k]) for k in range(dim)]
    out = []
    for energy, vec in pairs[:n_lowest]:
        vec = vec / np.linalg.norm(vec)
        out.append((energy, PureState(vec)))
    return out


def parity_of_vector(vec: np.ndarray) -> float:
    signs = _parity_diagonal(vec.shape[0])
    return float(np.sum(signs * np.abs(vec) ** 2))


def fidelity(rho: DensityMatrix, target: PureState) -> float:
    """Overlap <target| rho |target>, real in [0, 1] up to tolerance."""
    if rho.dim != target.dim:
        raise DimensionMismatchError(f"rho dim {rho.dim} != target dim {target.dim}")
    val = complex(target.amplitudes.conj() @ rho.matrix @ target.amplitudes)
    if abs(val.imag) > 1e-10:
        raise ValueError(f"fidelity has imaginary part {val.imag:.3e}")
    return float(val.real)


def _laguerre_phi0(z: np.ndarray, k: int) -> np.ndarray:
    """Weighted Laguerre seed sqrt(1/k!) z^{k/2} e^{-z/2}, evaluated in log space."""
    if k == 0:
        return np.exp(-0.5 * z)
    out = np.zeros_like(z)
    pos = z > 0.0
    log_phi = 0.5 * k * np.log(z[pos]) - 0.5 * z[pos] - 0.5 * math.lgamma(k + 1)
    out[pos] = np.exp(log_phi)
    return out


def wigner(
    rho: DensityMatrix, x_grid: np.ndarray, p_grid: np.ndarray, kbar: float = 1.0
) -> np.ndarray:
    """Wigner quasi-probability W[i, j] = W(x_i, p_j).

    Evaluated as a Fock-basis Laguerre series using the bounded, weighted
    three-term recurrence, so it stays stable up to dim ~ 200.  Normalized
    so that the full-plane integral is 1 and the vacuum peak is
    1/(pi*kbar).
    """
    x_grid = np.asarray(x_grid, dtype=float)
    p_grid = np.asarray(p_grid, dtype=float)
    if x_grid.ndim != 1 or p_grid.ndim != 1:
        raise ValueError("grids must be 1-D")
    if np.any(np.diff(x_grid) <= 0) or np.any(np.diff(p_grid) <= 0):
        raise ValueError("grids must be strictly increasing")
    dim = rho.dim
    u = x_grid[:, None] / math.sqrt(kbar)
    v = p_grid[None, :] / math.sqrt(kbar)
    r2 = u * u + v * v
    z = 2.0 * r2
    r = np.sqrt(r2)
    safe_r = np.where(r > 0, r, 1.0)
    phase = np.where(r > 0, (u - 1j * v) / safe_r, 1.0 + 0.0j)
    alt = np.where(np.arange(dim) % 2 == 0, 1.0, -1.0)
    total = np.zeros((x_grid.size, p_grid.size), dtype=float)
    phase_k = np.ones_like(phase)
    m = rho.matrix
    for k in range(dim):
        if k > 0:
            phase_k = phase_k * phase
        diag = np.diagonal(m, offset=-k)  # rho[n+k, n]
        if np.abs(diag).max() == 0.0:
            continue
        acc = _laguerre_series(z, k, diag * alt[: dim - k])
        if k == 0:
            total += acc.real
        else:
            total += 2.0 * (phase_k * acc).real
    return total / (math.pi * kbar)


def _laguerre_series(z: np.ndarray, k: int, coeffs: np.ndarray) -> np.ndarray:
    """Sum_n coeffs[n] * phi_n^(k)(z) with the orthonormal-Laguerre recurrence."""
    n_terms = coeffs.shape[0]
    phi_prev = np.zeros_like(z)
    phi = _laguerre_phi0(z, k)
    acc = coeffs[0] * phi.astype(np.complex128)
    for n in range(n_terms - 1):
        phi_next = (
            (2 * n + k + 1 - z) * phi - math.sqrt(n * (n + k)) * phi_prev
        ) / math.sqrt((n + 1) * (n + k + 1))
        phi_prev, phi = phi, phi_next
        acc = acc + coeffs[n + 1] * phi
    return acc


def hermite_functions(dim: int, x_grid: np.ndarray, kbar: float = 1.0) -> np.ndarray:
    """Orthonormal oscillator eigenfunctions psi_n(x), shape (dim, len(x))."""
    xi = np.asarray(x_grid, dtype=float) / math.sqrt(kbar)
    psi = np.zeros((dim, xi.size))
    psi[0] = math.pi ** (-0.25) * np.exp(-0.5 * xi * xi)
    if dim > 1:
        psi[1] = math.sqrt(2.0) * xi * psi[0]
    for n in range(2, dim):
        psi[n] = xi * math.sqrt(2.0 / n) * psi[n - 1] - math.sqrt((n - 1) / n) * psi[n - 2]
    return psi / kbar**0.25


def position_density(rho: DensityMatrix, x_grid: np.ndarray, kbar: float = 1.0) -> np.ndarray:
    """Diagonal of rho in the position representation, sampled on x_grid."""
    psi = hermite_functions(rho.dim, x_grid, kbar)
    return np.einsum("mx,mn,nx->x", psi, rho.matrix, psi).real


def phase_flow(
    kind: FeedbackKind, x_grid: np.ndarray, p_grid: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Classical phase-space flow (Vx, Vp) of a feedback generator.

    Hamiltonian flow of f(x, p): Vx = df/dp, Vp = -df/dx, evaluated
    analytically on the meshgrid of the two axes.  The flow is exactly
    tangent to the level sets of f.
    """
    x = np.asarray(x_grid, dtype=float)[:, None]
    p = np.asarray(p_grid, dtype=float)[None, :]
    zeros = np.zeros(np.broadcast_shapes(x.shape, p.shape))
    if kind is FeedbackKind.XP_SYM:  # f = 2xp
        return 2.0 * x + zeros, -2.0 * p + zeros
    if kind is FeedbackKind.X_SQUARED:  # f = x^2
        return zeros.copy(), -2.0 * x + zeros
    if kind is FeedbackKind.P2_MINUS_X2:
        return 2.0 * p + zeros, 2.0 * x + zeros
    raise ValueError(f"unknown feedback kind {kind!r}")  # pragma: no cover


# --- state constructors -----------------------------------------------------


def vacuum_state(space: FockSpace) -> PureState:
    amps = np.zeros(space.dim, dtype=np.complex128)
    amps[0] = 1.0
    return PureState(amps)


def fock_state(space: FockSpace, n: int) -> PureState:
    if not 0 <= n < space.dim:
        raise ValueError(f"Fock level {n} outside truncation {space.dim}")
    amps = np.zeros(space.dim, dtype=np.complex128)
    amps[n] = 1.0
    return PureState(amps)


def thermal_state(space: FockSpace, n_bar: float) -> DensityMatrix:
    """Thermal occupation diag(n_bar^n / (1+n_bar)^{n+1}), renormalized on truncation."""
    if n_bar < 0:
        raise ValueError(f"mean occupation must be >= 0, got {n_bar}")
    if n_bar == 0:
        return vacuum_state(space).density()
    ns = np.arange(space.dim)
    logp = ns * math.log(n_bar) - (ns + 1) * math.log(1.0 + n_bar)
    pops = np.exp(logp)
    pops /= pops.sum()
    return DensityMatrix(np.diag(pops).astype(np.complex128))


def coherent_state(space: FockSpace, alpha: complex) -> PureState:
    """Displaced vacuum with mean position sqrt(kbar)*Re(alpha), momentum sqrt(kbar)*Im(alpha).

    With this scaling a real ``alpha`` satisfies <x^2> = kbar*(alpha^2 + 1/2),
    so alpha = b places the wavepacket at a well minimum.
    """
    amp_ladder = complex(alpha) / math.sqrt(2.0)
    amps = np.zeros(space.dim, dtype=np.complex128)
    amps[0] = 1.0
    for n in range(1, space.dim):
        amps[n] = amps[n - 1] * amp_ladder / math.sqrt(n)
    amps *= math.exp(-0.5 * abs(amp_ladder) ** 2)
    norm = np.linalg.norm(amps)
    return PureState(amps / norm)


def cat_state(space: FockSpace, alpha: complex) -> PureState:
    """Even superposition of +/-alpha coherent states (vacuum when alpha = 0)."""
    plus = coherent_state(space, alpha).amplitudes
    minus = coherent_state(space, -alpha).amplitudes
    amps = plus + minus
    return PureState(amps / np.linalg.norm(amps))


def even_thermal_state(space: FockSpace, n_bar: float) -> DensityMatrix:
    return parity_project(thermal_state(space, n_bar), ParitySector.EVEN)


def ground_state(space: FockSpace, params: DoubleWellParams) -> PureState:
    """Even-parity ground state of the double well at this truncation."""
    h = double_well_hamiltonian(space, params)
    return spectrum(h, 1)[0][1]
