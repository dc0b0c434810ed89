import numpy as np
import pytest

from netclf.poly import PolyMatrix, eval_polymatrix, make_basis, build_transformation
from netclf.sdp import (
    AffinePolyMatrix,
    LinExpr,
    SdpBuilder,
    SdpCompileError,
    compile_poly_equality,
    compile_sos_matrix,
    default_gram_basis,
    dump_sdpa,
    solve_sdp,
)

TOL = 1e-9


def _min_trace_geq_identity(scale=1.0):
    b = SdpBuilder()
    X = b.psd_block(2)
    S = b.psd_block(2)
    for (i, j, r) in [(0, 0, 1.0), (0, 1, 0.0), (1, 1, 1.0)]:
        b.add_equality(b.block_entry(X, i, j) - b.block_entry(S, i, j), r)
    prob = b.build(objective={X: scale * np.eye(2)})
    return b, X, prob


class TestSolver:
    def test_min_trace_above_identity(self):
        b, X, prob = _min_trace_geq_identity()
        sol = solve_sdp(prob, tol=TOL)
        assert sol.status == "optimal"
        assert abs(sol.primal_obj - 2.0) <= 1e-8
        assert np.allclose(sol.blocks[X], np.eye(2), atol=1e-6)

    def test_scalar_lyapunov_feasibility(self):
        # find p with p >= 1 and 2*(-1)*p <= -1
        b = SdpBuilder()
        p = b.psd_block(1)
        s1 = b.psd_block(1)
        s2 = b.psd_block(1)
        b.add_equality(b.block_entry(p, 0, 0) - b.block_entry(s1, 0, 0), 1.0)
        b.add_equality(2.0 * b.block_entry(p, 0, 0) - b.block_entry(s2, 0, 0), 1.0)
        sol = solve_sdp(b.build(), tol=TOL)
        assert sol.status == "feasible"
        pval = sol.blocks[p][0, 0]
        assert pval >= 1.0 - 1e-8
        assert 2.0 * pval >= 1.0 - 1e-8

    def test_trace_contradiction_infeasible(self):
        b = SdpBuilder()
        X = b.psd_block(2)
        S = b.psd_block(2)
        for (i, j, r) in [(0, 0, 1.0), (0, 1, 0.0), (1, 1, 1.0)]:
            b.add_equality(b.block_entry(X, i, j) - b.block_entry(S, i, j), r)
        b.add_equality(b.block_entry(X, 0, 0) + b.block_entry(X, 1, 1), 1.0)
        sol = solve_sdp(b.build(), tol=TOL)
        assert sol.status == "infeasible"

    def test_duality_gap_bound(self):
        _, _, prob = _min_trace_geq_identity()
        sol = solve_sdp(prob, tol=TOL)
        assert abs(sol.primal_obj - sol.dual_obj) <= 10 * TOL * (1 + abs(sol.primal_obj))

    def test_objective_scaling_invariance(self):
        _, X1, p1 = _min_trace_geq_identity(1.0)
        _, X2, p2 = _min_trace_geq_identity(7.5)
        s1 = solve_sdp(p1, tol=TOL)
        s2 = solve_sdp(p2, tol=TOL)
        assert np.allclose(s1.blocks[X1], s2.blocks[X2], atol=1e-6)

    def test_solution_psd_and_residual_invariants(self):
        b, X, prob = _min_trace_geq_identity()
        sol = solve_sdp(prob, tol=TOL)
        for blk in sol.blocks.values():
            assert np.linalg.eigvalsh(0.5 * (blk + blk.T)).min() >= -10 * TOL
        # recompute equality residual from the returned blocks
        for coeffs, rhs in zip(prob.constraints, prob.rhs):
            val = sum(np.sum(np.asarray(a) * sol.blocks[blk]) for blk, a in coeffs.items())
            assert abs(val - rhs) <= 10 * TOL * (1 + abs(rhs))

    def test_free_scalar_round_trip(self):
        b = SdpBuilder()
        t = b.free_scalar()
        u = b.free_scalar()
        b.add_equality(t + 2.0 * u, -1.0)
        b.add_equality(t - u, 5.0)
        sol = solve_sdp(b.build(), tol=TOL)
        assert sol.status == "feasible"
        assert abs(b.value(sol, t) - 3.0) <= 1e-7
        assert abs(b.value(sol, u) - (-2.0)) <= 1e-7


def _gram_eval(Q, z_monos, q, x):
    zval = np.array([np.prod(np.asarray(x) ** np.asarray(m)) for m in z_monos])
    k = np.kron(zval[:, None], np.eye(q))  # (L*q, q)
    return k.T @ Q @ k


class TestSosCompile:
    def test_perfect_square(self):
        b = SdpBuilder()
        S = PolyMatrix(1, 1, 1, {(0, 0): {(2,): 1.0}})
        z = [(0,), (1,)]
        qblk = compile_sos_matrix(b, S, z)
        sol = solve_sdp(b.build(), tol=TOL)
        assert sol.status == "feasible"
        Q = sol.blocks[qblk]
        assert np.allclose(Q, np.diag([0.0, 1.0]), atol=1e-6)

    def test_negative_definite_infeasible(self):
        b = SdpBuilder()
        S = PolyMatrix(1, 1, 1, {(0, 0): {(2,): -1.0, (0,): -1.0}})
        compile_sos_matrix(b, S, [(0,), (1,)])
        sol = solve_sdp(b.build(), tol=TOL)
        assert sol.status == "infeasible"

    def test_block_of_squares(self):
        b = SdpBuilder()
        S = PolyMatrix(2, 2, 1, {(0, 0): {(2,): 1.0}, (1, 1): {(0,): 1.0}})
        qblk = compile_sos_matrix(b, S, [(0,), (1,)])
        sol = solve_sdp(b.build(), tol=TOL)
        assert sol.status == "feasible"
        # Gram identity reproduces S(x) on random points
        rng = np.random.default_rng(3)
        Q = 0.5 * (sol.blocks[qblk] + sol.blocks[qblk].T)
        for _ in range(100):
            x = rng.uniform(-2, 2, size=1)
            sval = eval_polymatrix(S, x)
            gval = _gram_eval(Q, [(0,), (1,)], 2, x)
            assert np.max(np.abs(gval - sval)) <= 1e-8 * (1 + np.max(np.abs(sval)))

    def test_gram_identity_nontrivial(self):
        # S(x) = [[x^2 + 1, x], [x, 2]] is PSD for all x
        b = SdpBuilder()
        S = PolyMatrix(
            2, 2, 1,
            {(0, 0): {(2,): 1.0, (0,): 1.0}, (0, 1): {(1,): 1.0},
             (1, 0): {(1,): 1.0}, (1, 1): {(0,): 2.0}},
        )
        qblk = compile_sos_matrix(b, S, [(0,), (1,)])
        sol = solve_sdp(b.build(), tol=TOL)
        assert sol.status == "feasible"
        Q = 0.5 * (sol.blocks[qblk] + sol.blocks[qblk].T)
        assert np.linalg.eigvalsh(Q).min() >= -1e-8
        rng = np.random.default_rng(11)
        for _ in range(100):
            x = rng.uniform(-3, 3, size=1)
            sval = eval_polymatrix(S, x)
            gval = _gram_eval(Q, [(0,), (1,)], 2, x)
            assert np.max(np.abs(gval - sval)) <= 1e-8 * (1 + np.max(np.abs(sval)))

    def test_unrepresentable_monomial_named(self):
        b = SdpBuilder()
        S = PolyMatrix(1, 1, 1, {(0, 0): {(4,): 1.0}})
        with pytest.raises(SdpCompileError, match="x1\\^4"):
            compile_sos_matrix(b, S, [(0,), (1,)])

    def test_default_gram_basis_uses_occurring_vars(self):
        S = AffinePolyMatrix(1, 1, 3, {(0, 0): {(2, 0, 0): 1.0, (0, 0, 0): 1.0}})
        z = default_gram_basis(S)
        assert z == [(0, 0, 0), (1, 0, 0)]  # only x1 occurs, degree 0..1


class TestPolyEquality:
    def test_scalar_coefficient_pinned(self):
        b = SdpBuilder()
        c = b.free_scalar()
        lhs = AffinePolyMatrix(1, 1, 1, {(0, 0): {(1,): c}})
        rhs = PolyMatrix(1, 1, 1, {(0, 0): {(1,): 2.0}})
        count = compile_poly_equality(b, lhs, rhs)
        assert count == 1
        sol = solve_sdp(b.build(), tol=TOL)
        assert sol.status == "feasible"
        assert abs(b.value(sol, c) - 2.0) <= 1e-7

    def test_zero_polynomial_forces_zero(self):
        b = SdpBuilder()
        c1, c2 = b.free_scalar(), b.free_scalar()
        lhs = AffinePolyMatrix(1, 1, 1, {(0, 0): {(0,): c1, (1,): c2}})
        compile_poly_equality(b, lhs, PolyMatrix.zero(1, 1, 1))
        sol = solve_sdp(b.build(), tol=TOL)
        assert sol.status == "feasible"
        assert abs(b.value(sol, c1)) <= 1e-7
        assert abs(b.value(sol, c2)) <= 1e-7

    def test_zero_equals_zero_emits_nothing(self):
        b = SdpBuilder()
        compile_poly_equality(b, PolyMatrix.zero(2, 2, 1), PolyMatrix.zero(2, 2, 1))
        assert b.num_equalities == 0

    def test_inconsistent_constant_raises(self):
        b = SdpBuilder()
        lhs = PolyMatrix(1, 1, 1, {(0, 0): {(1,): 1.0}})
        rhs = PolyMatrix(1, 1, 1, {(0, 0): {(1,): 2.0}})
        with pytest.raises(SdpCompileError):
            compile_poly_equality(b, lhs, rhs)

    def test_con1_equality_count_matches_symbolic_expansion(self):
        # basis [x], T=3: J0T Phi(x) = T(x) Xi with constant Phi and scalar Xi
        basis = make_basis(1, 1)
        J = np.array([[1.0, -0.5, 2.0]])  # 1 x 3 monomial data
        b = SdpBuilder()
        xi_blk = b.psd_block(1)
        xi = b.block_entry(xi_blk, 0, 0)
        phis = [b.free_scalar() for _ in range(3)]
        lhs = AffinePolyMatrix(1, 1, 1, {(0, 0): {
            (0,): J[0, 0] * phis[0] + J[0, 1] * phis[1] + J[0, 2] * phis[2],
        }})
        aleph = build_transformation(basis)  # [[1]]
        rhs = AffinePolyMatrix(1, 1, 1, {(0, 0): {(0,): xi}})
        count = compile_poly_equality(b, lhs, rhs)
        # symbolic expansion oracle: N*n*(#monomials) distinct (row, col, mono)
        monos = set()
        for pm in (lhs, rhs):
            for rc, poly in pm.entries.items():
                for m in poly:
                    monos.add((rc, m))
        assert count == len(monos) == basis.N * basis.n * 1
        assert aleph.entries[(0, 0)] == {(0,): 1.0}


class TestDump:
    def test_sdpa_dump_round_trip_structure(self):
        _, _, prob = _min_trace_geq_identity()
        text = dump_sdpa(prob)
        lines = text.strip().splitlines()
        assert lines[0] == "3"  # m
        assert lines[1] == "2"  # blocks
        assert lines[2].split() == ["2", "2"]
        rhs = [float(v) for v in lines[3].split()]
        assert rhs == [1.0, 0.0, 1.0]
        # objective entries are tagged 0, constraints 1..m
        tags = {int(ln.split()[0]) for ln in lines[4:]}
        assert tags == {0, 1, 2, 3}
