import math

import numpy as np
import pytest

from dwcontrol import hilbert as hb
from dwcontrol.errors import DimensionMismatchError, EmptySectorError

# Reference eigenvalues from a dim-120 double-precision eigensolve of the
# default well (a=0, b=3, h=5, kbar=1); used as regression oracles below.
E_LOWEST_REF = [
    1.024369798148765,
    1.0244308393396928,
    2.9317859996596307,
    2.937995133181014,
    4.469842970973437,
    4.635656778395815,
]


def random_density(rng, dim):
    m = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    rho = m @ m.conj().T
    return hb.DensityMatrix(rho / np.trace(rho))


def random_pure(rng, dim):
    v = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    return hb.PureState(v / np.linalg.norm(v))


class TestLadderAndQuadratures:
    def test_ladder_dim2(self):
        a, adag = hb.ladder_operators(hb.FockSpace(2))
        np.testing.assert_array_equal(a.matrix, [[0, 1], [0, 0]])
        np.testing.assert_array_equal(adag.matrix, [[0, 0], [1, 0]])

    def test_ladder_dim3_sqrt2(self):
        a, _ = hb.ladder_operators(hb.FockSpace(3))
        assert a.matrix[1, 2] == pytest.approx(math.sqrt(2))

    def test_number_operator_dim60(self):
        a, adag = hb.ladder_operators(hb.FockSpace(60))
        n = adag.matrix @ a.matrix
        np.testing.assert_allclose(np.diag(n).real, np.arange(60), atol=1e-12)
        assert np.abs(n - np.diag(np.diag(n))).max() == 0.0

    def test_x_dim2(self):
        x, _ = hb.quadratures(hb.FockSpace(2, kbar=1.0))
        s = 1 / math.sqrt(2)
        np.testing.assert_allclose(x.matrix, [[0, s], [s, 0]], atol=1e-15)

    @pytest.mark.parametrize("dim,kbar", [(16, 1.0), (40, 1.0), (60, 2.0), (33, 0.5)])
    def test_commutator_interior(self, dim, kbar):
        x, p = hb.quadratures(hb.FockSpace(dim, kbar))
        comm = x.matrix @ p.matrix - p.matrix @ x.matrix
        dev = np.abs(comm - 1j * kbar * np.eye(dim))
        assert dev[: dim - 1, : dim - 1].max() <= 1e-10

    def test_hermitian_flags(self):
        x, p = hb.quadratures(hb.FockSpace(12))
        assert x.hermitian and p.hermitian

    def test_hermitian_flag_rejects_nonhermitian(self):
        with pytest.raises(ValueError, match="hermitian"):
            hb.Operator(np.array([[0.0, 1.0], [0.0, 0.0]]), hermitian=True)


class TestDoubleWell:
    def test_classical_potential_values(self):
        # V(x) = (h/b^4)((x-a)^2 - b^2)^2 at x = 0 equals h; at x = +/-b equals 0.
        params = hb.DoubleWellParams()
        v = lambda x: (params.h / params.b**4) * ((x - params.a_offset) ** 2 - params.b**2) ** 2
        assert v(0.0) == pytest.approx(5.0)
        assert v(params.b) == 0.0
        assert v(-params.b) == 0.0

    def test_ground_energy_regression(self):
        h = hb.double_well_hamiltonian(hb.FockSpace(60), hb.DoubleWellParams())
        (e0, _), = hb.spectrum(h, 1)
        assert e0 == pytest.approx(E_LOWEST_REF[0], abs=1e-6)

    def test_spectrum_converged_vs_dim120(self):
        h60 = hb.double_well_hamiltonian(hb.FockSpace(60), hb.DoubleWellParams())
        h120 = hb.double_well_hamiltonian(hb.FockSpace(120), hb.DoubleWellParams())
        e60 = [e for e, _ in hb.spectrum(h60, 6)]
        e120 = [e for e, _ in hb.spectrum(h120, 6)]
        np.testing.assert_allclose(e60, e120, atol=1e-6)
        np.testing.assert_allclose(e120, E_LOWEST_REF, atol=1e-9)

    def test_tunneling_splitting(self):
        h = hb.double_well_hamiltonian(hb.FockSpace(120), hb.DoubleWellParams())
        pairs = hb.spectrum(h, 2)
        assert pairs[1][0] - pairs[0][0] == pytest.approx(6.104119092786853e-05, rel=1e-6)

    def test_parity_alternation(self):
        h = hb.double_well_hamiltonian(hb.FockSpace(60), hb.DoubleWellParams())
        pairs = hb.spectrum(h, 2)
        assert hb.parity_expectation(pairs[0][1]) == pytest.approx(1.0, abs=1e-9)
        assert hb.parity_expectation(pairs[1][1]) == pytest.approx(-1.0, abs=1e-9)

    def test_symmetric_well_commutes_with_parity(self):
        space = hb.FockSpace(40)
        h = hb.double_well_hamiltonian(space, hb.DoubleWellParams())
        par = hb.parity_operator(space)
        comm = h.matrix @ par.matrix - par.matrix @ h.matrix
        assert np.abs(comm).max() <= 1e-12 * np.abs(h.matrix).max()

    def test_offset_well_breaks_parity(self):
        space = hb.FockSpace(40)
        h = hb.double_well_hamiltonian(space, hb.DoubleWellParams(a_offset=0.7))
        par = hb.parity_operator(space)
        comm = h.matrix @ par.matrix - par.matrix @ h.matrix
        assert np.abs(comm).max() > 1e-6

    def test_b_zero_rejected(self):
        with pytest.raises(ValueError):
            hb.DoubleWellParams(b=0.0)

    def test_harmonic_oscillator_spectrum(self):
        space = hb.FockSpace(60)
        x, p = hb.quadratures(space)
        h = hb.Operator(0.5 * (p.matrix @ p.matrix + x.matrix @ x.matrix), hermitian=True)
        energies = [e for e, _ in hb.spectrum(h, 3)]
        np.testing.assert_allclose(energies, [0.5, 1.5, 2.5], atol=1e-8)


class TestFeedbackOperators:
    def test_xp_sym_dim2_hand_values(self):
        # Hand-multiplied 2x2 matrices: xp = i*(kbar/2)*diag(1,-1), px = (xp)^dag,
        # so the symmetrized product vanishes identically at this truncation.
        space = hb.FockSpace(2)
        x, p = hb.quadratures(space)
        xp = x.matrix @ p.matrix
        np.testing.assert_allclose(xp, 0.5j * np.diag([1.0, -1.0]), atol=1e-15)
        f = hb.feedback_operator(hb.FeedbackKind.XP_SYM, space)
        np.testing.assert_allclose(f.matrix, np.zeros((2, 2)), atol=1e-15)

    def test_xp_sym_commutes_with_parity(self):
        space = hb.FockSpace(40)
        f = hb.feedback_operator(hb.FeedbackKind.XP_SYM, space)
        par = hb.parity_operator(space)
        comm = f.matrix @ par.matrix - par.matrix @ f.matrix
        assert np.abs(comm).max() <= 1e-12

    def test_x_squared_matches_quadrature(self):
        space = hb.FockSpace(25)
        x, _ = hb.quadratures(space)
        f = hb.feedback_operator(hb.FeedbackKind.X_SQUARED, space)
        np.testing.assert_allclose(f.matrix, x.matrix @ x.matrix, atol=1e-14)

    def test_all_kinds_hermitian(self):
        space = hb.FockSpace(17)
        for kind in hb.FeedbackKind:
            assert hb.feedback_operator(kind, space).hermitian


class TestParity:
    def test_even_fock_unchanged(self):
        space = hb.FockSpace(8)
        s = hb.parity_project(hb.fock_state(space, 0), hb.ParitySector.EVEN)
        np.testing.assert_array_equal(s.amplitudes, hb.fock_state(space, 0).amplitudes)

    def test_odd_state_has_no_even_support(self):
        space = hb.FockSpace(8)
        with pytest.raises(EmptySectorError):
            hb.parity_project(hb.fock_state(space, 1), hb.ParitySector.EVEN)

    def test_even_thermal_zero_odd_populations(self):
        rho = hb.even_thermal_state(hb.FockSpace(20), n_bar=1.0)
        pops = np.diag(rho.matrix).real
        assert np.all(pops[1::2] == 0.0)
        assert np.trace(rho.matrix).real == pytest.approx(1.0, abs=1e-12)

    def test_projection_renormalizes(self):
        rng = np.random.default_rng(7)
        rho = random_density(rng, 12)
        even = hb.parity_project(rho, hb.ParitySector.EVEN)
        assert np.trace(even.matrix).real == pytest.approx(1.0, abs=1e-12)
        assert hb.parity_expectation(even) == pytest.approx(1.0, abs=1e-12)


class TestFidelity:
    def test_identity_case(self):
        g = hb.ground_state(hb.FockSpace(40), hb.DoubleWellParams())
        assert hb.fidelity(g.density(), g) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_parity_sectors(self):
        h = hb.double_well_hamiltonian(hb.FockSpace(40), hb.DoubleWellParams())
        pairs = hb.spectrum(h, 2)
        e1 = pairs[1][1]
        assert hb.fidelity(e1.density(), pairs[0][1]) == pytest.approx(0.0, abs=1e-12)

    def test_maximally_mixed(self):
        dim = 16
        rho = hb.DensityMatrix(np.eye(dim) / dim)
        rng = np.random.default_rng(3)
        assert hb.fidelity(rho, random_pure(rng, dim)) == pytest.approx(1 / dim, abs=1e-12)

    def test_bounds_on_random_states(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            dim = int(rng.integers(2, 24))
            f = hb.fidelity(random_density(rng, dim), random_pure(rng, dim))
            assert -1e-12 <= f <= 1 + 1e-12

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(0)
        with pytest.raises(DimensionMismatchError):
            hb.fidelity(random_density(rng, 4), random_pure(rng, 5))


class TestWigner:
    def setup_method(self):
        self.xs = np.linspace(-8.0, 8.0, 141)
        self.ps = np.linspace(-8.0, 8.0, 141)
        self.dx = self.xs[1] - self.xs[0]
        self.dp = self.ps[1] - self.ps[0]

    def test_vacuum_peak(self):
        vac = hb.vacuum_state(hb.FockSpace(30)).density()
        w = hb.wigner(vac, self.xs, self.ps)
        i0 = np.argmin(np.abs(self.xs))
        assert w[i0, i0] == pytest.approx(1 / math.pi, abs=1e-6)

    def test_vacuum_peak_scales_with_kbar(self):
        vac = hb.vacuum_state(hb.FockSpace(30)).density()
        w = hb.wigner(vac, self.xs, self.ps, kbar=2.0)
        i0 = np.argmin(np.abs(self.xs))
        assert w[i0, i0] == pytest.approx(1 / (2 * math.pi), abs=1e-6)

    def test_ground_state_lobes_and_fringes(self):
        g = hb.ground_state(hb.FockSpace(60), hb.DoubleWellParams())
        w = hb.wigner(g.density(), self.xs, self.ps)
        ip0 = np.argmin(np.abs(self.ps))
        ixp = np.argmin(np.abs(self.xs - 3.0))
        ixm = np.argmin(np.abs(self.xs + 3.0))
        assert w[ixp, ip0] > 0.1 and w[ixm, ip0] > 0.1
        ix0 = np.argmin(np.abs(self.xs))
        assert w[ix0, :].min() < -0.05  # interference fringes go negative

    def test_normalization_random_states(self):
        rng = np.random.default_rng(5)
        for _ in range(4):
            rho = random_density(rng, 10)
            w = hb.wigner(rho, self.xs, self.ps)
            assert 0.99 <= w.sum() * self.dx * self.dp <= 1.01

    def test_marginal_matches_position_density(self):
        g = hb.ground_state(hb.FockSpace(60), hb.DoubleWellParams())
        w = hb.wigner(g.density(), self.xs, self.ps)
        marginal = w.sum(axis=1) * self.dp
        density = hb.position_density(g.density(), self.xs)
        assert np.abs(marginal - density).sum() * self.dx <= 1e-2

    def test_rejects_unsorted_grid(self):
        vac = hb.vacuum_state(hb.FockSpace(4)).density()
        with pytest.raises(ValueError, match="increasing"):
            hb.wigner(vac, np.array([0.0, -1.0, 1.0]), self.ps)


class TestPhaseFlow:
    def setup_method(self):
        self.xs = np.linspace(-4, 4, 21)
        self.ps = np.linspace(-4, 4, 21)

    def test_x_squared_flow_has_no_x_component(self):
        vx, vp = hb.phase_flow(hb.FeedbackKind.X_SQUARED, self.xs, self.ps)
        assert np.all(vx == 0.0)

    def test_squeeze_flow_pushes_along_x(self):
        vx, vp = hb.phase_flow(hb.FeedbackKind.XP_SYM, self.xs, self.ps)
        ix = np.argmin(np.abs(self.xs - 1.0))
        ip = np.argmin(np.abs(self.ps))
        assert vx[ix, ip] > 0 and vp[ix, ip] == 0.0

    @pytest.mark.parametrize("kind", list(hb.FeedbackKind))
    def test_flow_tangent_to_level_sets(self, kind):
        vx, vp = hb.phase_flow(kind, self.xs, self.ps)
        x = self.xs[:, None]
        p = self.ps[None, :]
        if kind is hb.FeedbackKind.XP_SYM:
            fx, fp = 2 * p + 0 * x, 2 * x + 0 * p
        elif kind is hb.FeedbackKind.X_SQUARED:
            fx, fp = 2 * x + 0 * p, 0 * x + 0 * p
        else:
            fx, fp = -2 * x + 0 * p, 2 * p + 0 * x
        assert np.abs(vx * fx + vp * fp).max() == 0.0


class TestStates:
    def test_coherent_moments(self):
        space = hb.FockSpace(60, kbar=1.0)
        x, _ = hb.quadratures(space)
        x2 = hb.Operator(x.matrix @ x.matrix, hermitian=True)
        rho = hb.coherent_state(space, 3.0).density()
        assert rho.expectation(x2) == pytest.approx(1.0 * (9.0 + 0.5), abs=1e-9)

    def test_coherent_moments_kbar2(self):
        space = hb.FockSpace(80, kbar=2.0)
        x, _ = hb.quadratures(space)
        x2 = hb.Operator(x.matrix @ x.matrix, hermitian=True)
        rho = hb.coherent_state(space, 2.0).density()
        assert rho.expectation(x2) == pytest.approx(2.0 * (4.0 + 0.5), abs=1e-9)

    def test_cat_state_is_even(self):
        cat = hb.cat_state(hb.FockSpace(40), 2.0)
        assert hb.parity_expectation(cat) == pytest.approx(1.0, abs=1e-12)

    def test_cat_alpha_zero_is_vacuum(self):
        cat = hb.cat_state(hb.FockSpace(12), 0.0)
        np.testing.assert_allclose(cat.amplitudes, hb.vacuum_state(hb.FockSpace(12)).amplitudes)

    def test_thermal_trace_and_monotone_populations(self):
        rho = hb.thermal_state(hb.FockSpace(30), 1.0)
        pops = np.diag(rho.matrix).real
        assert np.trace(rho.matrix).real == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.diff(pops) < 0)

    def test_density_matrix_validation(self):
        with pytest.raises(ValueError, match="trace"):
            hb.DensityMatrix(np.eye(4))
        with pytest.raises(ValueError, match="hermitian"):
            m = np.eye(3) / 3 + 0.1j * np.triu(np.ones((3, 3)), 1)
            hb.DensityMatrix(m)

    def test_operator_values_frozen(self):
        x, _ = hb.quadratures(hb.FockSpace(8))
        with pytest.raises(ValueError):
            x.matrix[0, 0] = 1.0
