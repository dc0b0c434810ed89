"""Tests for the certificate synthesis stage.

The expensive full-synthesis fixtures run once per module; everything that
needs the hidden plant matrices (A, B) uses them strictly as a test oracle.
"""

import numpy as np
import pytest

from netclf.collect import TrajectoryData, generate_excitation, simulate_subsystem
from netclf.plant import Subsystem, benchmark_catalog, default_synthesis_basis
from netclf.poly import (
    MonomialBasis,
    build_transformation,
    eval_basis,
    eval_basis_cols,
    eval_polymatrix,
    eval_polymatrix_cols,
    make_basis,
)
from netclf.synth import (
    IssCertificate,
    RankGateError,
    SdpInfeasibleError,
    SynthesisError,
    coupling_gain,
    eval_certificate,
    lemma1_residual,
    load_certificate,
    save_certificate,
    synthesize_iss,
)


# ---------------------------------------------------------------------------
# helpers


def spacecraft_trajectory(seed=11, amplitude=30.0, T=15, derivative_mode="exact"):
    subs, _ = benchmark_catalog("spacecraft", 2, "ring")
    sub = subs[0].with_basis(default_synthesis_basis("spacecraft"))
    U = generate_excitation("uniform-random", seed, sub.m, T, amplitude=amplitude)
    W = generate_excitation("uniform-random", seed + 1, sub.sigma, T, amplitude=1.0)
    traj = simulate_subsystem(sub, [0.9, -0.8, 0.7], U, W, tau=0.01,
                              derivative_mode=derivative_mode, label="sc-test")
    return sub, traj


def academic_trajectory(seed=21, T=12):
    subs, _ = benchmark_catalog("academic", 3, "binary-tree")
    sub = subs[1].with_basis(default_synthesis_basis("academic"))  # one in-edge
    U = generate_excitation("uniform-random", seed, sub.m, T, amplitude=5.0)
    W = generate_excitation("uniform-random", seed + 1, sub.sigma, T, amplitude=0.5)
    return sub, simulate_subsystem(sub, [0.7, -0.5], U, W, tau=0.01, label="ac-test")


def lu_trajectory(seed=31, T=20):
    subs, _ = benchmark_catalog("lu", 2, "line")
    sub = subs[1].with_basis(default_synthesis_basis("lu"))
    U = generate_excitation("uniform-random", seed, sub.m, T, amplitude=30.0)
    W = generate_excitation("uniform-random", seed + 1, sub.sigma, T, amplitude=1.0)
    return sub, simulate_subsystem(sub, [0.9, -0.8, 0.7], U, W, tau=1e-4, label="lu-test")


def sample_box(rng, n, half_width, count):
    return rng.uniform(-half_width, half_width, size=(n, count))


def con1_defect(cert, traj, X):
    """max |J0T Phi(x) - T(x) Xi| over the sample columns of X."""
    trans = build_transformation(traj.basis)
    phi_vals = eval_polymatrix_cols(cert.Phi, X)            # (T, n, B)
    trans_vals = eval_polymatrix_cols(trans, X)             # (N, n, B)
    lhs = np.einsum("kt,tjb->kjb", traj.J0T, phi_vals)
    rhs = np.einsum("kjb,ji->kib", trans_vals, cert.Xi)
    return float(np.max(np.abs(lhs - rhs)))


def con2_max_eig(cert, traj, D, X):
    """max over samples of lambda_max(E Phi(x) + Phi(x)'E' + pi I + kappa Xi)."""
    E = traj.X1T - np.asarray(D, dtype=float).reshape(cert.n, -1) @ traj.W0T
    phi_vals = eval_polymatrix_cols(cert.Phi, X)            # (T, n, B)
    C = np.einsum("it,tjb->bij", E, phi_vals)
    C = C + C.transpose(0, 2, 1)
    C += cert.pi_i * np.eye(cert.n) + cert.kappa_i * cert.Xi
    return float(np.max(np.linalg.eigvalsh(C)))


def iss_decrease_defect(cert, sub, X):
    """Worst-case-interaction decrease defect at the sample columns.

    2x'P(A F(x) + B K(x)x) + kappa x'Px + ||D'Px||^2/rho <= 0 must hold for
    a valid certificate (the last term is the exact maximum over w of
    2x'PDw - rho ||w||^2).  Uses the hidden plant matrices as an oracle.
    """
    B = X.shape[1]
    F = eval_basis_cols(sub.basis, X)                       # (N, B)
    Kv = eval_polymatrix_cols(cert.K, X)                    # (m, n, B)
    u = np.einsum("mnb,nb->mb", Kv, X)
    xdot = sub.A @ F + sub.B @ u
    PX = cert.P @ X
    lie = 2.0 * np.sum(PX * xdot, axis=0)
    V = np.sum(X * PX, axis=0)
    if cert.rho_i > 0:
        worst_w = np.sum((sub.D.T @ PX) ** 2, axis=0) / cert.rho_i
    else:
        worst_w = np.zeros(B)
    return float(np.max(lie + cert.kappa_i * V + worst_w))


# ---------------------------------------------------------------------------
# interaction gain


class TestCouplingGain:
    def test_empty_channel(self):
        assert coupling_gain(np.zeros((3, 0)), 0.5) == 0.0

    def test_positive_weight_required(self):
        with pytest.raises(SynthesisError):
            coupling_gain(np.eye(2), 0.0)

    def test_scaling_is_quadratic(self):
        D = np.array([[0.3, -0.1], [0.2, 0.7]])
        base = coupling_gain(D, 0.25)
        assert coupling_gain(3.0 * D, 0.25) == pytest.approx(9.0 * base, rel=1e-12)

    # the published per-benchmark gains, reproduced from the coupling
    # blocks and penalty weights alone
    def test_spacecraft_ring_gain(self):
        D = 1e-4 * np.array([[0, 0, -1], [-1, 0, 0], [0, -1, 0]], dtype=float)
        assert coupling_gain(D, 0.00077986) == pytest.approx(1.2823e-5, rel=1e-3)

    def test_spacecraft_fully_connected_gain(self):
        block = 1e-4 * np.array([[0, 0, -1], [-1, 0, 0], [0, -1, 0]], dtype=float)
        D = np.hstack([block] * 999)
        assert coupling_gain(D, 0.71578) == pytest.approx(1.3957e-5, rel=1e-3)

    def test_academic_tree_gain(self):
        D = 1e-2 * np.array([[1.0, 0.0], [0.0, 0.0]])
        assert coupling_gain(D, 0.00014535) == pytest.approx(0.68799, rel=1e-3)

    def test_academic_star_gain(self):
        D = 1e-2 * np.array([[1.0, 0.0], [0.0, 0.0]])
        assert coupling_gain(D, 0.0001661) == pytest.approx(0.60205, rel=1e-3)

    def test_lu_line_gain(self):
        D = -1e-3 * np.eye(3)
        assert coupling_gain(D, 0.1304) == pytest.approx(7.671137e-6, rel=1e-3)


# ---------------------------------------------------------------------------
# scalar system with a brute-force feasibility oracle


def scalar_subsystem():
    basis = MonomialBasis(1, ((1,),))
    return Subsystem(1, 1, basis, np.array([[1.0]]), np.array([[1.0]]),
                     {2: np.array([[0.1]])})


class TestScalarOracle:
    KAPPA, PI = 0.5, 1.0

    @pytest.fixture(scope="class")
    def cert(self):
        sub = scalar_subsystem()
        U = generate_excitation("uniform-random", 7, 1, 3, amplitude=1.0)
        W = generate_excitation("uniform-random", 8, 1, 3, amplitude=0.5)
        traj = simulate_subsystem(sub, [1.0], U, W, tau=0.1, label="scalar")
        return synthesize_iss(traj, sub.D, self.KAPPA, self.PI)

    def feasible(self, p, k):
        # analytic certificate condition for xdot = x + u + 0.1 w with
        # u = k x and V = p x^2, interaction absorbed at penalty weight PI:
        # 2 p (1 + k) + PI p^2 <= -KAPPA p
        return 2.0 * p * (1.0 + k) + self.PI * p * p <= -self.KAPPA * p

    def test_synthesized_point_in_grid_feasible_region(self, cert):
        p = cert.P[0, 0]
        k = eval_polymatrix(cert.K, np.array([0.0]))[0, 0]
        ps = np.linspace(10.0 / 200, 10.0, 200)      # (0, 10]
        ks = np.linspace(-10.0, 0.0, 200)
        mask = np.array([[self.feasible(pv, kv) for kv in ks] for pv in ps])
        assert mask.any() and not mask.all()
        assert self.feasible(p, k)
        # the synthesized point's grid cell is feasible
        ip = int(np.argmin(np.abs(ps - p)))
        ik = int(np.argmin(np.abs(ks - k)))
        assert mask[ip, ik]

    def test_certified_inequality_on_state_grid(self, cert):
        p = cert.P[0, 0]
        k = eval_polymatrix(cert.K, np.array([0.0]))[0, 0]
        xs = np.linspace(-10.0, 10.0, 200)
        ws = np.linspace(-10.0, 10.0, 200)
        X, Wg = np.meshgrid(xs, ws)
        lie = 2.0 * p * X * (X + k * X + 0.1 * Wg)
        bound = -self.KAPPA * p * X**2 + cert.rho_i * Wg**2
        assert np.all(lie <= bound + 1e-9)

    def test_gain_value(self, cert):
        assert cert.rho_i == pytest.approx(0.01 / self.PI, rel=1e-12)

    def test_constant_gain_polynomial(self, cert):
        # one-variable degree-1 dictionary forces a constant gain
        assert cert.K.monomials() in ([], [(0,)])


# ---------------------------------------------------------------------------
# full synthesis on the benchmark families


class TestSpacecraftSynthesis:
    KAPPA, PI = 0.1, 0.001

    @pytest.fixture(scope="class")
    def setup(self):
        sub, traj = spacecraft_trajectory()
        cert = synthesize_iss(traj, sub.D, self.KAPPA, self.PI)
        return sub, traj, cert

    def test_certificate_shape_and_rates(self, setup):
        sub, traj, cert = setup
        assert cert.n == 3 and cert.m == 3
        assert cert.kappa_i == self.KAPPA and cert.pi_i == self.PI
        assert cert.data_ref == "sc-test"

    def test_lyapunov_matrix_inverse_pair(self, setup):
        _, _, cert = setup
        assert np.allclose(cert.P @ cert.Xi, np.eye(3), atol=1e-8)
        assert np.allclose(cert.P, cert.P.T)
        assert np.linalg.eigvalsh(cert.P)[0] > 0

    def test_eigen_bounds_exact(self, setup):
        _, _, cert = setup
        evals = np.linalg.eigvalsh(cert.P)
        assert cert.alpha_lo == evals[0]
        assert cert.alpha_hi == evals[-1]

    def test_gain_matches_formula(self, setup):
        sub, _, cert = setup
        assert cert.rho_i == pytest.approx(coupling_gain(sub.D, self.PI), rel=1e-12)

    def test_inverse_floor_respected(self, setup):
        _, _, cert = setup
        # normalized mode floors the inverse Lyapunov matrix at identity
        assert np.linalg.eigvalsh(cert.Xi)[0] >= 1.0 - 1e-8

    def test_consistency_identity_sampled(self, setup):
        _, traj, cert = setup
        X = sample_box(np.random.default_rng(0), 3, 2.0, 200)
        assert con1_defect(cert, traj, X) <= 1e-7

    def test_decrease_matrix_sampled(self, setup):
        sub, traj, cert = setup
        X = sample_box(np.random.default_rng(1), 3, 2.0, 10_000)
        assert con2_max_eig(cert, traj, sub.D, X) <= 1e-6

    def test_iss_decrease_sampled(self, setup):
        sub, _, cert = setup
        X = sample_box(np.random.default_rng(2), 3, 400.0, 10_000)
        assert iss_decrease_defect(cert, sub, X) <= 1e-6

    def test_quadratic_sandwich(self, setup):
        _, _, cert = setup
        X = sample_box(np.random.default_rng(3), 3, 50.0, 1000)
        V = np.einsum("ib,ij,jb->b", X, cert.P, X)
        norms = np.sum(X * X, axis=0)
        assert np.all(V >= cert.alpha_lo * norms * (1 - 1e-9))
        assert np.all(V <= cert.alpha_hi * norms * (1 + 1e-9))

    def test_feedback_degree(self, setup):
        _, _, cert = setup
        assert max(sum(m) for m in cert.K.monomials()) <= 1

    def test_closed_loop_representation(self, setup):
        sub, traj, cert = setup
        pts = sample_box(np.random.default_rng(4), 3, 5.0, 500).T
        assert lemma1_residual(cert, traj, sub.A, sub.B, sub.D, pts) <= 1e-8

    def test_corrupted_data_breaks_representation(self, setup):
        sub, traj, cert = setup
        X1T = traj.X1T.copy()
        X1T[0, 0] += 1.0
        bad = TrajectoryData(basis=traj.basis, U0T=traj.U0T, W0T=traj.W0T,
                             X0T=traj.X0T, X1T=X1T, tau=traj.tau)
        pts = sample_box(np.random.default_rng(5), 3, 5.0, 100).T
        assert lemma1_residual(cert, bad, sub.A, sub.B, sub.D, pts) > 1e-3

    def test_eval_certificate(self, setup):
        _, _, cert = setup
        x = np.array([1.5, -0.5, 2.0])
        V, u = eval_certificate(cert, x)
        assert V == pytest.approx(x @ cert.P @ x, rel=1e-12)
        assert np.allclose(u, eval_polymatrix(cert.K, x) @ x)
        V0, u0 = eval_certificate(cert, np.zeros(3))
        assert V0 == 0.0 and np.all(u0 == 0.0)

    def test_eval_certificate_dim_mismatch(self, setup):
        _, _, cert = setup
        with pytest.raises(SynthesisError):
            eval_certificate(cert, np.zeros(4))

    def test_feasibility_objective_also_valid(self, setup):
        sub, traj, _ = setup
        cert = synthesize_iss(traj, sub.D, self.KAPPA, self.PI,
                              objective="feasibility")
        X = sample_box(np.random.default_rng(6), 3, 2.0, 2000)
        assert con2_max_eig(cert, traj, sub.D, X) <= 1e-6
        assert iss_decrease_defect(cert, sub, X) <= 1e-6


class TestAcademicSynthesis:
    KAPPA, PI = 0.1, 0.00014535

    @pytest.fixture(scope="class")
    def setup(self):
        sub, traj = academic_trajectory()
        cert = synthesize_iss(traj, sub.D, self.KAPPA, self.PI)
        return sub, traj, cert

    def test_invariants(self, setup):
        sub, traj, cert = setup
        assert np.allclose(cert.P @ cert.Xi, np.eye(2), atol=1e-8)
        X = sample_box(np.random.default_rng(10), 2, 2.0, 200)
        assert con1_defect(cert, traj, X) <= 1e-7
        X = sample_box(np.random.default_rng(11), 2, 2.0, 10_000)
        assert con2_max_eig(cert, traj, sub.D, X) <= 1e-6
        X = sample_box(np.random.default_rng(12), 2, 100.0, 10_000)
        assert iss_decrease_defect(cert, sub, X) <= 1e-6

    def test_representation_oracle(self, setup):
        sub, traj, cert = setup
        pts = sample_box(np.random.default_rng(13), 2, 5.0, 500).T
        assert lemma1_residual(cert, traj, sub.A, sub.B, sub.D, pts) <= 1e-8


class TestLuSynthesis:
    KAPPA, PI = 1e-4, 0.1304

    def test_synthesis_and_oracle(self):
        sub, traj = lu_trajectory()
        cert = synthesize_iss(traj, sub.D, self.KAPPA, self.PI)
        X = sample_box(np.random.default_rng(20), 3, 2.0, 5000)
        assert con2_max_eig(cert, traj, sub.D, X) <= 1e-6
        assert iss_decrease_defect(cert, sub, X) <= 1e-6
        pts = sample_box(np.random.default_rng(21), 3, 5.0, 500).T
        assert lemma1_residual(cert, traj, sub.A, sub.B, sub.D, pts) <= 1e-8


# ---------------------------------------------------------------------------
# failure paths


class TestFailurePaths:
    def test_rank_gate_zero_data(self):
        sub = scalar_subsystem()
        traj = simulate_subsystem(sub, [0.0], np.zeros((1, 3)), np.zeros((1, 3)),
                                  tau=0.1)
        with pytest.raises(RankGateError, match="more samples"):
            synthesize_iss(traj, sub.D, 0.5, 1.0)

    def test_rank_gate_too_few_samples(self):
        # T == N never passes the richness gate
        sub = scalar_subsystem()
        traj = simulate_subsystem(sub, [1.0], np.ones((1, 1)), np.zeros((1, 1)),
                                  tau=0.1)
        with pytest.raises(RankGateError):
            synthesize_iss(traj, sub.D, 0.5, 1.0)

    def test_uncontrollable_unstable_is_infeasible(self):
        basis = MonomialBasis(1, ((1,),))
        sub = Subsystem(1, 1, basis, np.array([[1.0]]), np.array([[0.0]]), {})
        U = generate_excitation("uniform-random", 3, 1, 4, amplitude=1.0)
        traj = simulate_subsystem(sub, [1.0], U, None, tau=0.05)
        with pytest.raises(SdpInfeasibleError, match="larger dataset"):
            synthesize_iss(traj, np.zeros((1, 0)), 0.5, 1.0)

    def test_parameter_validation(self):
        sub = scalar_subsystem()
        U = generate_excitation("uniform-random", 7, 1, 3, amplitude=1.0)
        W = generate_excitation("uniform-random", 8, 1, 3, amplitude=0.5)
        traj = simulate_subsystem(sub, [1.0], U, W, tau=0.1)
        with pytest.raises(SynthesisError):
            synthesize_iss(traj, sub.D, -0.5, 1.0)
        with pytest.raises(SynthesisError):
            synthesize_iss(traj, sub.D, 0.5, 0.0)
        with pytest.raises(SynthesisError):
            synthesize_iss(traj, sub.D, 0.5, 1.0, eps=0.0)
        with pytest.raises(SynthesisError):
            synthesize_iss(traj, sub.D, 0.5, 1.0, objective="fastest")
        with pytest.raises(SynthesisError):
            synthesize_iss(traj, sub.D, 0.5, 1.0, phi_degree=-1)
        with pytest.raises(SynthesisError):
            synthesize_iss(traj, np.ones((1, 2)), 0.5, 1.0)

    def test_certificate_invariants(self):
        from netclf.poly import PolyMatrix
        K = PolyMatrix(1, 1, 1, {(0, 0): {(0,): -2.0}})
        Phi = PolyMatrix(3, 1, 1, {})
        good = dict(P=np.eye(1), Phi=Phi, Xi=np.eye(1), kappa_i=0.5, pi_i=1.0,
                    rho_i=0.01, alpha_lo=1.0, alpha_hi=1.0, K=K)
        IssCertificate(**good)
        for bad in (dict(kappa_i=0.0), dict(pi_i=-1.0), dict(rho_i=-0.1),
                    dict(alpha_lo=0.0), dict(alpha_lo=2.0)):
            with pytest.raises(SynthesisError):
                IssCertificate(**{**good, **bad})


# ---------------------------------------------------------------------------
# serialization


class TestSerialization:
    def test_round_trip_bit_identical(self, tmp_path):
        sub, traj = academic_trajectory()
        cert = synthesize_iss(traj, sub.D, 0.1, 0.00014535)
        path = tmp_path / "subsystem.cert"
        save_certificate(cert, path)
        loaded = load_certificate(path)
        assert np.array_equal(loaded.P, cert.P)
        assert np.array_equal(loaded.Xi, cert.Xi)
        assert loaded.kappa_i == cert.kappa_i
        assert loaded.pi_i == cert.pi_i
        assert loaded.rho_i == cert.rho_i
        assert loaded.alpha_lo == cert.alpha_lo
        assert loaded.alpha_hi == cert.alpha_hi
        assert loaded.data_ref == cert.data_ref
        assert loaded.Phi.entries == cert.Phi.entries
        assert loaded.K.entries == cert.K.entries
        second = tmp_path / "again.cert"
        save_certificate(loaded, second)
        assert path.read_bytes() == second.read_bytes()

    def test_rejects_other_files(self, tmp_path):
        path = tmp_path / "junk.cert"
        path.write_text("not a certificate\n")
        with pytest.raises(SynthesisError, match="not a certificate"):
            load_certificate(path)

    def test_reports_bad_line(self, tmp_path):
        sub, traj = academic_trajectory()
        cert = synthesize_iss(traj, sub.D, 0.1, 0.00014535)
        path = tmp_path / "subsystem.cert"
        save_certificate(cert, path)
        lines = path.read_text().splitlines()
        lines[1] = "kappo 0.1"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(SynthesisError, match="kappa"):
            load_certificate(path)
