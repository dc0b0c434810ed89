"""Block-diagonal semidefinite programming: model, compiler, and solver.

Problems are stated in primal standard form over a list of PSD blocks::

    minimize    sum_b <C_b, X_b>
    subject to  sum_b <A_kb, X_b> = b_k   (k = 1..m),   X_b >= 0

with symmetric coefficient matrices.  A feasibility problem is one whose
objective is identically zero; the solver then stops at the first iterate
whose equality residual meets tolerance (interior-point iterates are
positive definite throughout, so any such iterate is strictly feasible).

The solver is a Mehrotra-style predictor-corrector primal-dual interior
point method with the HKM symmetrized Newton direction and a dense Schur
complement.  Free (sign-indefinite) scalar decision variables are
eliminated before the iteration starts by an orthogonal projection of the
equality system onto the null space of their coefficient columns, so the
core method only ever sees cone variables.  (The alternatives both break
down here: splitting frees into nonnegative pairs makes the pair halves
diverge near convergence, and an augmented saddle system inherits a
singular leading block whenever a constraint touches only free
variables.)  Primal infeasibility is declared when the dual objective
diverges while the scaled dual residual stays bounded (a normalized
Farkas certificate).

On top of the raw problem form sits a small compiler used by the synthesis
layer: affine expressions in declared decision variables (`LinExpr`),
polynomial matrices with affine coefficients (`AffinePolyMatrix`),
coefficient-wise polynomial equalities, and sum-of-squares matrix
constraints via an explicit Gram block.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .poly import Monomial, PolyMatrix, mono_degree, mono_mul, mono_to_str, monomials_up_to


class SdpError(Exception):
    """Base class for modelling and solver errors."""


class SdpCompileError(SdpError):
    """Raised when a constraint cannot be compiled (e.g. inconsistent
    constant equality, or an SOS monomial outside the Gram span)."""


# ---------------------------------------------------------------------------
# Problem and solution containers


@dataclass
class SdpProblem:
    block_dims: list[int]
    # objective: block index -> symmetric matrix (missing blocks are zero)
    objective: dict[int, np.ndarray]
    # constraints[k]: block index -> symmetric coefficient matrix
    constraints: list[dict[int, np.ndarray]]
    rhs: np.ndarray
    # free (sign-indefinite) scalars: constraint coefficients and cost
    free_cols: np.ndarray | None = None  # (m, nf)
    free_cost: np.ndarray | None = None  # (nf,)

    def __post_init__(self):
        m = len(self.constraints)
        if self.free_cols is None:
            self.free_cols = np.zeros((m, 0))
        self.free_cols = np.asarray(self.free_cols, dtype=float).reshape(m, -1)
        nf = self.free_cols.shape[1]
        if self.free_cost is None:
            self.free_cost = np.zeros(nf)
        self.free_cost = np.asarray(self.free_cost, dtype=float).reshape(nf)

    @property
    def m(self) -> int:
        return len(self.constraints)

    @property
    def nfree(self) -> int:
        return self.free_cols.shape[1]

    def is_feasibility(self) -> bool:
        return (all(np.all(mat == 0.0) for mat in self.objective.values())
                and not np.any(self.free_cost))


@dataclass
class SdpSolution:
    status: str  # optimal | feasible | infeasible | max-iterations | numerical-failure
    blocks: dict[int, np.ndarray] | None
    y: np.ndarray | None
    dual_blocks: dict[int, np.ndarray] | None
    primal_obj: float
    dual_obj: float
    rel_primal: float
    rel_dual: float
    rel_gap: float
    iterations: int
    free: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")


# ---------------------------------------------------------------------------
# Solver


def _sym(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


def _max_step_psd(X: np.ndarray, dX: np.ndarray) -> float:
    """Largest a with X + a*dX >= 0, for X > 0 (inf if always)."""
    try:
        L = np.linalg.cholesky(X)
        Y = sla.solve_triangular(L, dX, lower=True)
        W = sla.solve_triangular(L, Y.T, lower=True).T
        lam = np.linalg.eigvalsh(_sym(W)).min()
    except np.linalg.LinAlgError:
        try:
            # fall back to a generalized eigenvalue bound
            lam = np.linalg.eigvalsh(np.linalg.solve(X, dX)).min()
        except np.linalg.LinAlgError:
            return 0.0  # X numerically singular: do not move
    if lam >= -1e-14:
        return np.inf
    return 1.0 / (-lam)


def _max_step_vec(x: np.ndarray, dx: np.ndarray) -> float:
    neg = dx < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-x[neg] / dx[neg]))


class _Split:
    """Problem data separated into big (dim > 1) and scalar blocks.

    Free scalar variables are eliminated here, before the interior-point
    loop ever sees the problem: with F the free-column matrix, the feasible
    right-hand sides satisfy N^T (b - A(X)) = 0 for an orthonormal basis N
    of null(F^T), so the constraints are projected onto that basis and the
    objective is shifted by the particular dual multiplier y_p solving
    F^T y_p = c_f.  The reduction is orthogonal (SVD-based), exact, and
    leaves a pure cone problem of size m - rank(F).
    """

    def __init__(self, prob: SdpProblem):
        self.prob = prob
        self.big_ids = [b for b, d in enumerate(prob.block_dims) if d > 1]
        self.lin_ids = [b for b, d in enumerate(prob.block_dims) if d == 1]
        self.dims = {b: prob.block_dims[b] for b in self.big_ids}
        m = prob.m
        self.A = {b: np.zeros((m, d, d)) for b, d in self.dims.items()}
        self.C = {b: np.zeros((d, d)) for b, d in self.dims.items()}
        lin_pos = {b: i for i, b in enumerate(self.lin_ids)}
        self.nlin = len(self.lin_ids)
        self.A_lin = np.zeros((m, self.nlin))
        self.c_lin = np.zeros(self.nlin)
        for b, mat in prob.objective.items():
            if b in self.dims:
                self.C[b] = _sym(np.asarray(mat, dtype=float))
            else:
                self.c_lin[lin_pos[b]] = float(np.asarray(mat).reshape(()))
        for k, coeffs in enumerate(prob.constraints):
            for b, mat in coeffs.items():
                if b in self.dims:
                    self.A[b][k] = _sym(np.asarray(mat, dtype=float))
                else:
                    self.A_lin[k, lin_pos[b]] = float(np.asarray(mat).reshape(()))
        self.b = np.asarray(prob.rhs, dtype=float)
        self.nf = prob.nfree
        self.obj_shift = 0.0
        self._null = None
        self._y_part = np.zeros(0)
        self._recover = None
        if self.nf:
            F = np.asarray(prob.free_cols, dtype=float)
            c_f = np.asarray(prob.free_cost, dtype=float)
            U, svals, _ = np.linalg.svd(F, full_matrices=True)
            cut = (svals[0] * max(F.shape) * np.finfo(float).eps
                   if svals.size and svals[0] > 0.0 else 0.0)
            rank = int(np.sum(svals > cut))
            null = U[:, rank:]
            y_part = np.linalg.lstsq(F.T, c_f, rcond=None)[0]
            self.obj_shift = float(self.b @ y_part)
            F_pinv = np.linalg.pinv(F, rcond=max(F.shape) * np.finfo(float).eps)
            A_orig = {b: self.A[b] for b in self.big_ids}
            A_lin_orig, b_orig = self.A_lin, self.b

            def free_from_primal(big, lin):
                resid = b_orig - A_lin_orig @ lin if self.nlin else b_orig.copy()
                for blk in self.big_ids:
                    resid -= np.einsum("kij,ji->k", A_orig[blk], big[blk])
                return F_pinv @ resid

            self._recover = free_from_primal
            self.C = {b: self.C[b] - np.einsum("k,kij->ij", y_part, self.A[b])
                      for b in self.big_ids}
            self.c_lin = self.c_lin - self.A_lin.T @ y_part
            self.A = {b: np.einsum("km,kij->mij", null, self.A[b])
                      for b in self.big_ids}
            self.A_lin = null.T @ self.A_lin
            self.b = null.T @ self.b
            self._null = null
            self._y_part = y_part
        self.ntot = sum(self.dims.values()) + self.nlin
        self.presolve_infeasible = False

        def _row_norms():
            mm = self.b.shape[0]
            sq = self.A_lin**2 if self.nlin else np.zeros((mm, 0))
            return np.sqrt(
                sum((self.A[b] ** 2).sum(axis=(1, 2)) for b in self.big_ids)
                + (sq.sum(axis=1) if mm else 0.0)
            ) if mm else np.zeros(0)

        def _scale_rows():
            norms = _row_norms()
            d = np.where(norms > 0.0, norms, 1.0)
            for blk in self.big_ids:
                self.A[blk] = self.A[blk] / d[:, None, None]
            if self.nlin:
                self.A_lin = self.A_lin / d[:, None]
            self.b = self.b / d
            return d

        # equilibrate: equality rows mix data scales spanning many orders of
        # magnitude (monomial samples vs. decay-rate terms), which otherwise
        # wrecks the Schur complement conditioning
        d1 = _scale_rows()

        # rank compression: eliminating the free columns can leave far more
        # rows than independent cone directions, making the Schur complement
        # singular by construction.  Replace the rows by an orthonormal basis
        # of their row space; any component of the right-hand side outside
        # that space is a contradiction no cone variable can repair.
        self._compress = None
        mm = self.b.shape[0]
        if mm:
            R = np.concatenate(
                [self.A[b].reshape(mm, -1) for b in self.big_ids]
                + ([self.A_lin] if self.nlin else []), axis=1)
            U, svals, _ = np.linalg.svd(R, full_matrices=True)
            cut = 1e-12 * svals[0] if svals.size and svals[0] > 0.0 else 0.0
            r = int(np.sum(svals > cut))
            if r < mm:
                resid = U[:, r:].T @ self.b
                if resid.size and float(np.max(np.abs(resid))) > 1e-9 * (
                        1.0 + float(np.max(np.abs(self.b)))):
                    self.presolve_infeasible = True
                Ured = U[:, :r]
                for blk in self.big_ids:
                    self.A[blk] = np.einsum("km,kij->mij", Ured, self.A[blk])
                if self.nlin:
                    self.A_lin = Ured.T @ self.A_lin
                self.b = Ured.T @ self.b
                self._compress = Ured
        d2 = _scale_rows()

        self.m = self.b.shape[0]
        self._d1 = d1
        self._d2 = d2
        self.a_norms = _row_norms()
        self.c_norm = np.sqrt(
            sum((self.C[b] ** 2).sum() for b in self.big_ids)
            + (self.c_lin**2).sum()
        )

    def apply(self, big: dict[int, np.ndarray], lin: np.ndarray) -> np.ndarray:
        """A(W) for possibly-nonsymmetric big parts: tr(A_k W_b) + A_lin @ w."""
        out = np.zeros(self.m)
        for b in self.big_ids:
            out += np.einsum("kij,ji->k", self.A[b], big[b])
        if self.nlin:
            out += self.A_lin @ lin
        return out

    def adjoint(self, y: np.ndarray):
        big = {b: np.einsum("k,kij->ij", y, self.A[b]) for b in self.big_ids}
        lin = self.A_lin.T @ y if self.nlin else np.zeros(0)
        return big, lin

    def recover_y(self, y: np.ndarray) -> np.ndarray:
        y = y / self._d2
        if self._compress is not None:
            y = self._compress @ y
        y = y / self._d1
        if self._null is None:
            return y
        return self._y_part + self._null @ y

    def recover_free(self, big, lin) -> np.ndarray | None:
        if self._recover is None:
            return None
        return self._recover(big, lin)


def solve_sdp(problem: SdpProblem, tol: float = 1e-9, max_iter: int = 100,
              stop_at_feasible: bool | None = None) -> SdpSolution:
    """Solve a block SDP; see module docstring for the algorithm.

    Returns a solution whose status the caller must check.  For statuses
    `max-iterations` and `numerical-failure` the best iterate seen so far
    is attached.  With `stop_at_feasible` the iteration returns the first
    primal-feasible iterate instead of driving the objective to optimality
    (an objective may still be supplied: it keeps the iterates away from
    unbounded feasible rays).  It defaults to true exactly when the
    objective is identically zero.
    """
    data = _Split(problem)
    if data.presolve_infeasible:
        return SdpSolution("infeasible", None, None, None,
                           np.nan, np.nan, np.inf, np.inf, np.inf, 0)
    m = data.m  # free variables are already projected out
    feas_mode = (problem.is_feasibility() if stop_at_feasible is None
                 else bool(stop_at_feasible))

    # identity-scaled start
    if m:
        scale_p = max(1.0, float(np.max(np.abs(data.b) / (1.0 + data.a_norms))))
    else:
        scale_p = 1.0
    xi = 10.0 * max(np.sqrt(data.ntot), scale_p * np.sqrt(data.ntot))
    eta = 10.0 * max(1.0, float(data.a_norms.max()) if m else 1.0, data.c_norm)
    X = {b: xi * np.eye(d) for b, d in data.dims.items()}
    x_lin = xi * np.ones(data.nlin)
    y = np.zeros(m)
    S = {b: eta * np.eye(d) for b, d in data.dims.items()}
    s_lin = eta * np.ones(data.nlin)

    b_scale = 1.0 + (float(np.max(np.abs(data.b))) if m else 0.0)
    c_scale = 1.0 + data.c_norm
    gamma = 0.98

    best = None
    best_score = np.inf
    status = "max-iterations"
    it = 0

    def pack(status, rp, rd, gap, pobj, dobj, it):
        blocks = {b: X[b].copy() for b in data.big_ids}
        for i, bid in enumerate(data.lin_ids):
            blocks[bid] = np.array([[x_lin[i]]])
        duals = {b: S[b].copy() for b in data.big_ids}
        for i, bid in enumerate(data.lin_ids):
            duals[bid] = np.array([[s_lin[i]]])
        return SdpSolution(status, blocks, data.recover_y(y), duals,
                           pobj + data.obj_shift, dobj + data.obj_shift,
                           rp, rd, gap, it, free=data.recover_free(X, x_lin))

    for it in range(max_iter + 1):
        # residuals
        r_p = data.b - data.apply(X, x_lin) if m else np.zeros(0)
        Aty_big, aty_lin = data.adjoint(y)
        Rd = {b: data.C[b] - Aty_big[b] - S[b] for b in data.big_ids}
        rd_lin = data.c_lin - aty_lin - s_lin if data.nlin else np.zeros(0)
        mu = (
            sum(np.sum(X[b] * S[b]) for b in data.big_ids) + x_lin @ s_lin
        ) / max(1, data.ntot)

        pobj = (
            sum(np.sum(data.C[b] * X[b]) for b in data.big_ids) + data.c_lin @ x_lin
        )
        dobj = data.b @ y if m else 0.0
        rel_p = (float(np.max(np.abs(r_p))) if m else 0.0) / b_scale
        rd_norm = max(
            [float(np.max(np.abs(Rd[b]))) for b in data.big_ids]
            + ([float(np.max(np.abs(rd_lin)))] if data.nlin else [])
            + [0.0]
        )
        rel_d = rd_norm / c_scale
        rel_gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))

        if not np.isfinite(mu) or not np.isfinite(rel_p):
            return pack("numerical-failure", rel_p, rel_d, rel_gap, pobj, dobj, it)

        score = max(rel_p, rel_d, rel_gap if not feas_mode else 0.0)
        if score < best_score:
            best_score = score
            best = pack(status, rel_p, rel_d, rel_gap, pobj, dobj, it)

        if feas_mode:
            if rel_p <= tol:
                return pack("feasible", rel_p, rel_d, rel_gap, pobj, dobj, it)
        else:
            if rel_p <= tol and rel_d <= tol and rel_gap <= tol:
                return pack("optimal", rel_p, rel_d, rel_gap, pobj, dobj, it)

        # normalized Farkas divergence check for primal infeasibility
        if m and dobj > 0 and rel_p > tol:
            farkas = (1.0 + data.c_norm + rd_norm) / dobj
            if farkas < 1e-9:
                return pack("infeasible", rel_p, rel_d, rel_gap, pobj, dobj, it)

        if it == max_iter:
            break
        if m == 0:
            # no constraints: X is already feasible
            return pack("feasible" if feas_mode else "optimal",
                        0.0, rel_d, rel_gap, pobj, dobj, it)

        # factorizations of S
        Sinv = {}
        try:
            for b in data.big_ids:
                Sinv[b] = np.linalg.inv(_sym(S[b]))
        except np.linalg.LinAlgError:
            return _finish_failure(best)

        # Schur complement
        M = np.zeros((m, m))
        if data.nlin:
            w = x_lin / s_lin
            M += (data.A_lin * w) @ data.A_lin.T
        V = {}
        for b in data.big_ids:
            V[b] = np.einsum("ij,kjl,lm->kim", X[b], data.A[b], Sinv[b])
            M += np.einsum("kij,lji->kl", data.A[b], V[b])
        M = _sym(M)

        if not np.all(np.isfinite(M)):
            return _finish_failure(best)
        cho = None
        # absolute ridge first, then a ridge relative to the matrix scale in
        # case badly conditioned late iterates inflate the diagonal
        m_scale = max(1.0, float(np.max(np.diag(M))))
        for reg in (1e-10, 1e-8, 1e-6, 1e-4, 1e-8 * m_scale, 1e-6 * m_scale):
            try:
                cho = sla.cho_factor(M + reg * np.eye(m), lower=True)
                break
            except np.linalg.LinAlgError:
                continue
        if cho is None:
            return _finish_failure(best)

        G = {b: X[b] @ Rd[b] @ Sinv[b] for b in data.big_ids}
        g_lin = x_lin * rd_lin / s_lin if data.nlin else np.zeros(0)
        rhs_common = data.b + data.apply(G, g_lin)

        def direction(nu, Tc_big, tc_lin):
            rhs = rhs_common.copy()
            if nu != 0.0:
                rhs -= nu * data.apply(Sinv, 1.0 / s_lin if data.nlin else np.zeros(0))
            if Tc_big is not None:
                rhs += data.apply(Tc_big, tc_lin)
            dy = sla.cho_solve(cho, rhs)
            # iterative refinement against the unregularised Schur matrix;
            # the ridge otherwise leaks first-order error into the step
            for _ in range(2):
                dy = dy + sla.cho_solve(cho, rhs - M @ dy)
            aty_b, aty_l = data.adjoint(dy)
            dS = {b: Rd[b] - aty_b[b] for b in data.big_ids}
            ds_l = rd_lin - aty_l if data.nlin else np.zeros(0)
            dX = {}
            for b in data.big_ids:
                raw = -X[b] - X[b] @ dS[b] @ Sinv[b]
                if nu != 0.0:
                    raw += nu * Sinv[b]
                if Tc_big is not None:
                    raw -= Tc_big[b]
                dX[b] = _sym(raw)
            dx_l = np.zeros(0)
            if data.nlin:
                dx_l = -x_lin - x_lin * ds_l / s_lin
                if nu != 0.0:
                    dx_l += nu / s_lin
                if Tc_big is not None:
                    dx_l -= tc_lin
            return dy, dX, dx_l, dS, ds_l

        def max_steps(dX, dx_l, dS, ds_l):
            # free variables never limit the step
            ap = min(
                [_max_step_psd(X[b], dX[b]) for b in data.big_ids]
                + ([_max_step_vec(x_lin, dx_l)] if data.nlin else [])
                + [np.inf]
            )
            ad = min(
                [_max_step_psd(S[b], dS[b]) for b in data.big_ids]
                + ([_max_step_vec(s_lin, ds_l)] if data.nlin else [])
                + [np.inf]
            )
            return ap, ad

        # predictor
        _, dXa, dxa, dSa, dsa = direction(0.0, None, None)
        ap_a, ad_a = max_steps(dXa, dxa, dSa, dsa)
        ap_a, ad_a = min(1.0, ap_a), min(1.0, ad_a)
        mu_aff = (
            sum(np.sum((X[b] + ap_a * dXa[b]) * (S[b] + ad_a * dSa[b])) for b in data.big_ids)
            + (x_lin + ap_a * dxa) @ (s_lin + ad_a * dsa)
        ) / max(1, data.ntot)
        sigma = min(1.0, max(0.0, (mu_aff / mu) ** 3)) if mu > 0 else 0.0

        # corrector
        Tc = {b: dXa[b] @ dSa[b] @ Sinv[b] for b in data.big_ids}
        tc = dxa * dsa / s_lin if data.nlin else np.zeros(0)
        dy, dX, dx_l, dS, ds_l = direction(sigma * mu, Tc, tc)
        ap, ad = max_steps(dX, dx_l, dS, ds_l)
        ap = min(1.0, gamma * ap)
        ad = min(1.0, gamma * ad)

        # containment: exact Newton directions contract both residual norms,
        # so a step that inflates either one signals an inaccurate Schur
        # solve; halve it until the increase is at most evaluation noise
        # (which scales with the iterate magnitudes)
        rp_abs = float(np.max(np.abs(r_p))) if m else 0.0
        anorm_max = float(data.a_norms.max()) if m else 0.0
        sq = np.sqrt(max(1, data.ntot))
        accepted = False
        for _ in range(16):
            Xn = {b: _sym(X[b] + ap * dX[b]) for b in data.big_ids}
            xn_lin = x_lin + ap * dx_l if data.nlin else x_lin
            Sn = {b: _sym(S[b] + ad * dS[b]) for b in data.big_ids}
            sn_lin = s_lin + ad * ds_l if data.nlin else s_lin
            yn = y + ad * dy
            rp_new = (
                float(np.max(np.abs(data.b - data.apply(Xn, xn_lin))))
                if m else 0.0
            )
            aty_b, aty_l = data.adjoint(yn)
            rd_new = max(
                [float(np.max(np.abs(data.C[b] - aty_b[b] - Sn[b])))
                 for b in data.big_ids]
                + ([float(np.max(np.abs(data.c_lin - aty_l - sn_lin)))]
                   if data.nlin else [])
                + [0.0]
            )
            xmax = max(
                [float(np.max(np.abs(Xn[b]))) for b in data.big_ids]
                + ([float(np.max(np.abs(xn_lin)))] if data.nlin else [])
                + [0.0]
            )
            smax = max(
                [float(np.max(np.abs(Sn[b]))) for b in data.big_ids]
                + ([float(np.max(np.abs(sn_lin)))] if data.nlin else [])
                + [0.0]
            )
            ymax = float(np.max(np.abs(yn))) if m else 0.0
            rp_cap = 2.0 * rp_abs + 1e-12 * (
                b_scale + sq * (1.0 + anorm_max) * xmax)
            rd_cap = 2.0 * rd_norm + 1e-12 * (
                c_scale + sq * (anorm_max * ymax + smax))
            if rp_new <= rp_cap and rd_new <= rd_cap:
                accepted = True
                break
            ap *= 0.5
            ad *= 0.5
        if not accepted:
            break  # direction unusable at any step length: report best iterate
        X, x_lin, S, s_lin, y = Xn, xn_lin, Sn, sn_lin, yn

    if best is None:
        return SdpSolution("numerical-failure", None, None, None,
                           np.nan, np.nan, np.inf, np.inf, np.inf, it)
    best.status = "max-iterations"
    return best


def _finish_failure(best):
    if best is None:
        return SdpSolution("numerical-failure", None, None, None,
                           np.nan, np.nan, np.inf, np.inf, np.inf, 0)
    best.status = "numerical-failure"
    return best


# ---------------------------------------------------------------------------
# Affine modelling layer


class LinExpr:
    """Sparse affine expression in decision variables.

    Keys are `("b", block, i, j)` for a symmetric-block entry (i <= j) or
    `("f", idx)` for a free scalar.  Supports +, -, and scalar *.
    """

    __slots__ = ("terms", "const")

    def __init__(self, terms=None, const=0.0):
        self.terms = dict(terms) if terms else {}
        self.const = float(const)

    @staticmethod
    def lift(value) -> "LinExpr":
        if isinstance(value, LinExpr):
            return value
        return LinExpr(const=float(value))

    def copy(self) -> "LinExpr":
        return LinExpr(self.terms, self.const)

    def is_zero(self, tol: float = 0.0) -> bool:
        return abs(self.const) <= tol and all(abs(v) <= tol for v in self.terms.values())

    def __add__(self, other):
        other = LinExpr.lift(other)
        out = self.copy()
        out.const += other.const
        for k, v in other.terms.items():
            out.terms[k] = out.terms.get(k, 0.0) + v
        return out

    __radd__ = __add__

    def __neg__(self):
        return LinExpr({k: -v for k, v in self.terms.items()}, -self.const)

    def __sub__(self, other):
        return self + (-LinExpr.lift(other))

    def __rsub__(self, other):
        return LinExpr.lift(other) + (-self)

    def __mul__(self, a):
        a = float(a)
        return LinExpr({k: a * v for k, v in self.terms.items()}, a * self.const)

    __rmul__ = __mul__

    def __repr__(self):
        return f"LinExpr({self.terms}, {self.const})"


class SdpBuilder:
    """Incrementally assembles an :class:`SdpProblem` from affine constraints.

    PSD blocks are declared up front; free scalars stay free (the solver
    handles them natively).  Equalities are affine expressions pinned to a
    right-hand side.
    """

    def __init__(self):
        self._dims: list[int] = []
        self._nfree = 0
        self._eqs: list[tuple[LinExpr, float]] = []

    def psd_block(self, dim: int) -> int:
        if dim < 1:
            raise SdpCompileError(f"block dimension must be >= 1, got {dim}")
        self._dims.append(int(dim))
        return len(self._dims) - 1

    def block_entry(self, block: int, i: int, j: int) -> LinExpr:
        if not 0 <= block < len(self._dims):
            raise SdpCompileError(f"unknown block {block}")
        d = self._dims[block]
        if not (0 <= i < d and 0 <= j < d):
            raise SdpCompileError(f"entry ({i}, {j}) outside block of dim {d}")
        a, b = (i, j) if i <= j else (j, i)
        return LinExpr({("b", block, a, b): 1.0})

    def free_scalar(self) -> LinExpr:
        idx = self._nfree
        self._nfree += 1
        return LinExpr({("f", idx): 1.0})

    def add_equality(self, expr: LinExpr, rhs: float = 0.0) -> None:
        expr = LinExpr.lift(expr)
        if not expr.terms:
            if abs(expr.const - rhs) > 0.0:
                raise SdpCompileError(
                    f"inconsistent constant equality: {expr.const} == {rhs}"
                )
            return  # trivially satisfied; no constraint emitted
        self._eqs.append((expr, float(rhs)))

    @property
    def num_equalities(self) -> int:
        return len(self._eqs)

    @property
    def num_blocks(self) -> int:
        return len(self._dims)

    def build(self, objective: dict[int, np.ndarray] | None = None) -> SdpProblem:
        """Assemble the problem."""
        constraints = []
        rhs = np.zeros(len(self._eqs))
        free_cols = np.zeros((len(self._eqs), self._nfree))
        for k, (expr, r) in enumerate(self._eqs):
            coeffs: dict[int, np.ndarray] = {}
            for key, v in expr.terms.items():
                if key[0] == "b":
                    _, blk, i, j = key
                    mat = coeffs.setdefault(blk, np.zeros((self._dims[blk],) * 2))
                    if i == j:
                        mat[i, i] += v
                    else:
                        mat[i, j] += 0.5 * v
                        mat[j, i] += 0.5 * v
                else:
                    free_cols[k, key[1]] += v
            constraints.append(coeffs)
            rhs[k] = r - expr.const
        return SdpProblem(list(self._dims), dict(objective or {}), constraints, rhs,
                          free_cols=free_cols)

    def value(self, sol: SdpSolution, expr) -> float:
        """Evaluate an affine expression at a solution."""
        expr = LinExpr.lift(expr)
        out = expr.const
        for key, v in expr.terms.items():
            if key[0] == "b":
                _, blk, i, j = key
                out += v * sol.blocks[blk][i, j]
            else:
                out += v * sol.free[key[1]]
        return out

    def block_value(self, sol: SdpSolution, block: int) -> np.ndarray:
        return _sym(sol.blocks[block])


@dataclass
class AffinePolyMatrix:
    """Polynomial matrix whose coefficients are affine in decision variables.

    ``entries[(r, c)]`` maps monomials to LinExpr (plain floats are lifted).
    """

    rows: int
    cols: int
    nvars: int
    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        lifted: dict = {}
        for (r, c), poly in self.entries.items():
            lifted[(r, c)] = {tuple(m): LinExpr.lift(v) for m, v in poly.items()}
        self.entries = lifted

    @classmethod
    def from_polymatrix(cls, pm: PolyMatrix) -> "AffinePolyMatrix":
        return cls(pm.rows, pm.cols, pm.nvars,
                   {rc: dict(poly) for rc, poly in pm.entries.items()})

    def coefficient(self, r: int, c: int, mono: Monomial) -> LinExpr:
        return self.entries.get((r, c), {}).get(tuple(mono), LinExpr())

    def add_term(self, r: int, c: int, mono: Monomial, expr) -> None:
        poly = self.entries.setdefault((r, c), {})
        cur = poly.get(tuple(mono))
        poly[tuple(mono)] = LinExpr.lift(expr) if cur is None else cur + expr

    def monomials(self) -> list[Monomial]:
        monos = {m for poly in self.entries.values() for m, e in poly.items()
                 if not e.is_zero()}
        return sorted(monos, key=lambda m: (mono_degree(m), tuple(-e for e in m)))


def compile_poly_equality(builder: SdpBuilder, lhs, rhs) -> int:
    """Pin two polynomial matrices together coefficient-by-coefficient.

    Both sides may be PolyMatrix or AffinePolyMatrix; they must agree in
    shape and variable count.  Returns the number of scalar equalities
    emitted (trivial 0 == 0 rows are skipped; a nonzero constant mismatch
    raises SdpCompileError).
    """
    if isinstance(lhs, PolyMatrix):
        lhs = AffinePolyMatrix.from_polymatrix(lhs)
    if isinstance(rhs, PolyMatrix):
        rhs = AffinePolyMatrix.from_polymatrix(rhs)
    if (lhs.rows, lhs.cols, lhs.nvars) != (rhs.rows, rhs.cols, rhs.nvars):
        raise SdpCompileError("shape mismatch in polynomial equality")
    before = builder.num_equalities
    cells = set(lhs.entries) | set(rhs.entries)
    for rc in sorted(cells):
        monos = set(lhs.entries.get(rc, {})) | set(rhs.entries.get(rc, {}))
        for mono in sorted(monos):
            expr = lhs.coefficient(*rc, mono) - rhs.coefficient(*rc, mono)
            builder.add_equality(expr, 0.0)
    return builder.num_equalities - before


def default_gram_basis(S: AffinePolyMatrix) -> list[Monomial]:
    """Monomials of degree 0..ceil(deg(S)/2) in the variables occurring in S,
    pruned for diagonal consistency.

    If the square of a candidate monomial neither occurs in S nor can be
    formed as a product of two other surviving candidates, every feasible
    Gram matrix has the corresponding diagonal entry equal to zero, which
    forces the whole row to zero and leaves the cone without an interior
    (the solver then has no central path to follow).  Dropping such
    monomials loses no feasible point.  The pruning runs to a fixpoint
    because each removal can orphan further squares.
    """
    monos = S.monomials()
    deg = max((mono_degree(m) for m in monos), default=0)
    used = sorted({i for m in monos for i, e in enumerate(m) if e > 0})
    half = (deg + 1) // 2
    basis: list[Monomial] = []
    for m in monomials_up_to(len(used), half):
        full = [0] * S.nvars
        for pos, var in enumerate(used):
            full[var] = m[pos]
        basis.append(tuple(full))
    s_monos = set(monos)
    changed = True
    while changed:
        changed = False
        for k, zk in enumerate(basis):
            square = mono_mul(zk, zk)
            if square in s_monos:
                continue
            rest = [z for i, z in enumerate(basis) if i != k]
            if any(mono_mul(rest[a], rest[b]) == square
                   for a in range(len(rest)) for b in range(a, len(rest))):
                continue
            del basis[k]
            changed = True
            break
    if not basis:  # S identically zero: keep the constant monomial
        basis = [tuple([0] * S.nvars)]
    return basis


def compile_sos_matrix(builder: SdpBuilder, S, gram_basis: list[Monomial] | None = None) -> int:
    """Constrain a symmetric polynomial matrix S(x) to be a matrix sum of
    squares: S(x) == (z(x) (x) I_q)^T Q (z(x) (x) I_q) with Q >= 0.

    Adds one PSD Gram block of size q*len(z) plus the coefficient-matching
    equalities, and returns the Gram block index.  Monomials of S outside
    the Gram product set get their coefficients pinned to zero; if such a
    coefficient is a nonzero constant no basis could ever work, and that
    raises SdpCompileError.
    """
    if isinstance(S, PolyMatrix):
        S = AffinePolyMatrix.from_polymatrix(S)
    if S.rows != S.cols:
        raise SdpCompileError("SOS constraint requires a square matrix")
    q = S.rows
    if gram_basis is None:
        gram_basis = default_gram_basis(S)
    z = [tuple(m) for m in gram_basis]
    if len(set(z)) != len(z):
        raise SdpCompileError("duplicate monomials in Gram basis")
    L = len(z)
    qblk = builder.psd_block(q * L)

    # group ordered Gram-basis pairs by their product monomial
    products: dict[Monomial, list[tuple[int, int]]] = {}
    for l1 in range(L):
        for l2 in range(L):
            products.setdefault(mono_mul(z[l1], z[l2]), []).append((l1, l2))

    s_monos = set(S.monomials())
    for mono in sorted(s_monos - set(products)):
        for i in range(q):
            for j in range(i, q):
                coeff = S.coefficient(i, j, mono)
                if coeff.terms:
                    builder.add_equality(coeff, 0.0)
                elif coeff.const != 0.0:
                    raise SdpCompileError(
                        f"monomial {mono_to_str(mono)} of the SOS matrix is "
                        "not a product of two Gram-basis monomials; enlarge "
                        "the Gram basis"
                    )

    for i in range(q):
        for j in range(i, q):
            for eta, pairs in sorted(products.items()):
                gram = LinExpr()
                for l1, l2 in pairs:
                    gram = gram + builder.block_entry(qblk, l1 * q + i, l2 * q + j)
                builder.add_equality(S.coefficient(i, j, eta) - gram, 0.0)
    return qblk


# ---------------------------------------------------------------------------
# Plain-text export (SDPA-like sparse format)


def dump_sdpa(problem: SdpProblem) -> str:
    """Serialize in an SDPA-like sparse text form.

    Line layout: m; number of blocks; block sizes; rhs; then
    ``k block row col value`` entries with k=0 meaning the objective and
    1-based block/row/col indices.  Only upper-triangle entries are listed.
    The format has no free-variable section, so each free scalar is dumped
    as a difference of two trailing 1x1 blocks.
    """
    nf = problem.nfree
    dims = list(problem.block_dims) + [1, 1] * nf
    base = len(problem.block_dims)

    out = io.StringIO()
    out.write(f"{problem.m}\n")
    out.write(f"{len(dims)}\n")
    out.write(" ".join(str(d) for d in dims) + "\n")
    out.write(" ".join(f"{v:.17g}" for v in problem.rhs) + "\n")

    def emit(k, coeffs, frow=None):
        for blk in sorted(coeffs):
            mat = np.asarray(coeffs[blk])
            for i in range(mat.shape[0]):
                for j in range(i, mat.shape[1]):
                    if mat[i, j] != 0.0:
                        out.write(f"{k} {blk + 1} {i + 1} {j + 1} {mat[i, j]:.17g}\n")
        if frow is not None:
            for idx in range(nf):
                if frow[idx] != 0.0:
                    pos, neg = base + 2 * idx, base + 2 * idx + 1
                    out.write(f"{k} {pos + 1} 1 1 {frow[idx]:.17g}\n")
                    out.write(f"{k} {neg + 1} 1 1 {-frow[idx]:.17g}\n")

    emit(0, problem.objective, problem.free_cost if nf else None)
    for k, coeffs in enumerate(problem.constraints):
        emit(k + 1, coeffs, problem.free_cols[k] if nf else None)
    return out.getvalue()
