"""Certificate synthesis for one subsystem from a single experiment.

Decision variables are a positive-definite matrix (the inverse of the
quadratic Lyapunov matrix) and the polynomial coefficient matrix that ties
it to the recorded data.  Two constraint families are compiled onto the
semidefinite solver:

* consistency - the monomial trajectory times the coefficient polynomial
  must reproduce the state-transformation image of the candidate matrix,
  coefficient by coefficient;
* decrease - a sum-of-squares matrix certificate that the data-side
  derivative expression decays at the requested rate, with the requested
  quadratic penalty absorbing the neighbor-interaction channel.

On success the certificate carries the Lyapunov matrix, the feedback law,
the decay rate, and the interaction gain used later for network-level
composition.  The plant coefficients are never consulted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .collect import TrajectoryData, check_rank
from .poly import (
    PolyMatrix,
    build_transformation,
    eval_basis,
    eval_polymatrix,
    from_coeff_stack,
    mono_degree,
    mono_from_str,
    mono_to_str,
    monomials_up_to,
)
from .sdp import (
    AffinePolyMatrix,
    LinExpr,
    SdpBuilder,
    compile_sos_matrix,
    default_gram_basis,
    solve_sdp,
)


class SynthesisError(Exception):
    """Raised for invalid synthesis requests or malformed certificate files."""


class RankGateError(SynthesisError):
    """The monomial trajectory is not numerically full row rank."""


class SdpInfeasibleError(SynthesisError):
    """The synthesis SDP admits no solution for the requested rates."""


class SdpNumericalError(SynthesisError):
    """The solver stopped without a usable iterate."""


@dataclass(frozen=True)
class IssCertificate:
    """Everything the network layer needs to know about one subsystem.

    ``P`` is the Lyapunov matrix (V(x) = x'Px), ``Xi`` its inverse as
    returned by the solver, ``Phi`` the data-side coefficient polynomial,
    ``K`` the state-dependent feedback gain (u = K(x)x), ``kappa_i`` the
    certified decay rate, ``pi_i`` the quadratic penalty weight, and
    ``rho_i`` the resulting interaction gain.  ``alpha_lo``/``alpha_hi``
    are the extreme eigenvalues of ``P``.
    """

    P: np.ndarray
    Phi: PolyMatrix
    Xi: np.ndarray
    kappa_i: float
    pi_i: float
    rho_i: float
    alpha_lo: float
    alpha_hi: float
    K: PolyMatrix
    data_ref: str = ""

    def __post_init__(self) -> None:
        P = np.asarray(self.P, dtype=float)
        Xi = np.asarray(self.Xi, dtype=float)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "Xi", Xi)
        n = P.shape[0]
        if P.shape != (n, n) or Xi.shape != (n, n):
            raise SynthesisError("P and Xi must be square matrices of equal size")
        if self.Phi.cols != n or self.K.cols != n:
            raise SynthesisError("Phi and K must have one column per state")
        if not (self.kappa_i > 0 and self.pi_i > 0):
            raise SynthesisError("decay rate and penalty weight must be positive")
        if self.rho_i < 0:
            raise SynthesisError("interaction gain cannot be negative")
        if not (0 < self.alpha_lo <= self.alpha_hi):
            raise SynthesisError("eigenvalue bounds must satisfy 0 < lo <= hi")

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def m(self) -> int:
        return self.K.rows


def coupling_gain(D, pi_i: float) -> float:
    """Interaction gain: squared spectral norm of D over the penalty weight."""
    if pi_i <= 0:
        raise SynthesisError("penalty weight must be positive")
    D = np.asarray(D, dtype=float)
    if D.size == 0:
        return 0.0
    return float(np.linalg.norm(D, 2) ** 2 / pi_i)


def _var_key(builder: SdpBuilder):
    """Fresh free scalar, returned as its LinExpr term key."""
    return next(iter(builder.free_scalar().terms))


def synthesize_iss(traj: TrajectoryData, D, kappa_i: float, pi_i: float, *,
                   phi_degree: int | None = None, eps: float = 1e-6,
                   rank_rtol: float = 1e-8, objective: str = "normalized",
                   alpha_target: float | None = None,
                   sdp_tol: float = 1e-9, max_iter: int = 200) -> IssCertificate:
    """Synthesize a quadratic certificate and feedback law from data.

    ``D`` is the known interaction-channel matrix (n x sigma, possibly
    empty).  ``kappa_i`` and ``pi_i`` are the requested decay rate and
    penalty weight.  Scaling any solution up stays feasible, so large
    solutions are never informative; ``objective`` selects how hard the
    scale is pushed down.  ``normalized`` (default) re-solves with the
    quadratic penalty inflated one decade at a time and then divides the
    solution back down, which multiplies the smallest eigenvalue of the
    Lyapunov matrix -- the margin the network layer consumes -- by the
    same factor while leaving the feedback law at the moderate size the
    solver found it.  (Working at the solver's natural scale and moving
    the requirement is numerically far kinder than chasing a tiny
    solution directly.)  The search stops once that eigenvalue reaches
    ``alpha_target`` (default: one hundred times the interaction gain
    over the decay rate, a comfortable small-gain margin for networks of
    peers like this subsystem).  ``feasibility`` accepts the first
    interior point without the search; it is faster and yields a valid
    but more conservative certificate.
    """
    basis = traj.basis
    n, N, T = basis.n, basis.N, traj.T
    if not (kappa_i > 0 and pi_i > 0):
        raise SynthesisError("kappa_i and pi_i must be positive")
    if eps <= 0:
        raise SynthesisError("eps must be positive")
    if objective not in ("normalized", "feasibility"):
        raise SynthesisError(f"unknown objective {objective!r}")
    D = np.asarray(D, dtype=float).reshape(n, -1) if np.size(D) else np.zeros((n, 0))
    sigma = traj.W0T.shape[0]
    if D.shape != (n, sigma):
        raise SynthesisError(f"D must be {n}x{sigma} to match the recorded "
                             f"interaction samples, got {D.shape}")
    gate = check_rank(traj.J0T, rank_rtol)
    if not gate.ok:
        raise RankGateError(
            f"monomial trajectory fails the data-richness gate ({gate}); "
            "collect more samples or excite the plant harder")
    min_degree = basis.max_degree - 1
    if phi_degree is None:
        phi_degree = min_degree
    if phi_degree < min_degree:
        raise SynthesisError(f"phi_degree must be at least {min_degree} "
                             "to balance the consistency constraint")

    phi_monos = monomials_up_to(n, phi_degree)
    L = len(phi_monos)
    # Xi = (solver block) + I: the unit eigenvalue floor pins the solution
    # shape at the solver's natural scale (without it, a nearly singular
    # direction is feasible and poisons the feedback law); the downscale
    # at the end moves the whole spectrum to where the margin needs it
    shift = 1.0
    trans = build_transformation(basis)
    E = traj.X1T - D @ traj.W0T
    J = traj.J0T
    zero_mono = (0,) * n
    sym_pairs = [(a, b) for a in range(n) for b in range(a, n)]
    nsym = len(sym_pairs)

    # --- reduce the coefficient matrix away before building the SDP.
    # The consistency identity and the non-representable decrease
    # coefficients are linear equations on the stacked coefficients with a
    # penalty-independent matrix, so the coefficients collapse to an affine
    # image of Xi plus the few null directions that can still move a
    # decrease coefficient.  Solving in the reduced variables removes the
    # enormous do-nothing null space through which an interior-point
    # iterate can otherwise buy the decrease at absurd coefficient norms.
    nphi = T * n * L

    def pidx(t: int, j: int, l: int) -> int:
        return (t * n + j) * L + l

    # the gram basis depends only on the monomial support of the decrease
    # expression, which is the coefficient-monomial set itself
    probe = AffinePolyMatrix(n, n, n)
    for a in range(n):
        for b in range(n):
            for mono in phi_monos:
                probe.add_term(a, b, mono, LinExpr({("probe", 0): 1.0}))
    gram_basis = default_gram_basis(probe)
    gram_l0 = gram_basis.index(zero_mono) if zero_mono in gram_basis else -1
    representable = {tuple(g1e + g2e for g1e, g2e in zip(g1, g2))
                     for g1 in gram_basis for g2 in gram_basis}

    # symmetric-coefficient functionals sym(E * Phi)(mono) of vec(Phi)
    def sym_coeff_row(a: int, b: int, l: int) -> np.ndarray:
        row = np.zeros(nphi)
        base_b = np.arange(T) * (n * L) + b * L + l
        base_a = np.arange(T) * (n * L) + a * L + l
        row[base_b] += E[a]
        row[base_a] += E[b]
        return row

    rows, xi_rhs = [], []
    # consistency: J0T * Phi(x) == T(x) * Xi, coefficient by coefficient
    for (k, jstar), poly in trans.entries.items():
        (gamma, _), = poly.items()
        for j in range(n):
            for l, mono in enumerate(phi_monos):
                row = np.zeros(nphi)
                row[np.arange(T) * (n * L) + j * L + l] = J[k]
                rhs = np.zeros(nsym)
                if mono == gamma:
                    rhs[sym_pairs.index((min(jstar, j), max(jstar, j)))] = 1.0
                rows.append(row)
                xi_rhs.append(rhs)
    # pinned decrease coefficients: monomials outside the gram products
    # must vanish identically
    for a, b in sym_pairs:
        for l, mono in enumerate(phi_monos):
            if mono not in representable:
                rows.append(sym_coeff_row(a, b, l))
                xi_rhs.append(np.zeros(nsym))
    A_sys = np.array(rows)
    B_xi = np.array(xi_rhs)
    # equilibrate: consistency rows scale with the monomial data, pinned
    # rows with the derivative data, often orders of magnitude apart
    scale = np.linalg.norm(A_sys, axis=1)
    scale = np.where(scale > 0.0, scale, 1.0)
    A_sys /= scale[:, None]
    B_xi /= scale[:, None]

    U_sys, sv_sys, Vt_sys = np.linalg.svd(A_sys, full_matrices=True)
    rank = int(np.sum(sv_sys > 1e-10 * sv_sys[0])) if sv_sys.size else 0
    # affine part: Phi = Pmap . vecsym(Xi) solves the equations row-exactly
    Pmap = (Vt_sys[:rank].T / sv_sys[:rank]) @ (U_sys[:, :rank].T @ B_xi)
    # solvability of the dropped rows imposes linear conditions on Xi
    G_man = U_sys[:, rank:].T @ B_xi
    if G_man.size:
        _, sv_g, Vt_g = np.linalg.svd(G_man)
        G_man = Vt_g[sv_g > 1e-10 * max(sv_g[0], 1e-300)] if sv_g.size else G_man[:0]
    # null directions that still act on some decrease coefficient
    N_null = Vt_sys[rank:].T
    F_S = np.array([sym_coeff_row(a, b, l)
                    for a, b in sym_pairs for l in range(L)])
    C_ns = F_S @ N_null
    if C_ns.size:
        _, sv_c, Vt_c = np.linalg.svd(C_ns)
        keep = int(np.sum(sv_c > 1e-10 * sv_c[0])) if sv_c.size else 0
        N_eff = N_null @ Vt_c[:keep].T
    else:
        N_eff = N_null[:, :0]
    ndir = N_eff.shape[1]
    # decrease-coefficient action of the affine part and the null moves;
    # pinned coefficients are zero by construction, so snap the rounding
    # residue before it leaks into the compiled equalities
    SP = F_S @ Pmap
    SN = F_S @ N_eff
    for p in range(nsym):
        for l, mono in enumerate(phi_monos):
            if mono not in representable:
                SP[p * L + l] = 0.0
                SN[p * L + l] = 0.0

    def make_problem(pi_factor: float):
        builder = SdpBuilder()
        xi_blk = builder.psd_block(n)
        zkeys = [_var_key(builder) for _ in range(ndir)]

        def xi_entry(a: int, b: int) -> LinExpr:
            expr = builder.block_entry(xi_blk, a, b)
            return expr + shift if a == b else expr

        xi_exprs = [xi_entry(a, b) for a, b in sym_pairs]
        for grow in G_man:
            cond = LinExpr({})
            for q, g in enumerate(grow):
                if g != 0.0:
                    cond = cond + g * xi_exprs[q]
            builder.add_equality(cond, 0.0)

        # decrease: -(E*Phi(x) + Phi(x)'E' + pi*I + kappa*Xi) is a matrix
        # sum of squares, with E the interaction-corrected derivative data
        S = AffinePolyMatrix(n, n, n)
        for p, (a, b) in enumerate(sym_pairs):
            for l, mono in enumerate(phi_monos):
                frow = p * L + l
                expr = LinExpr({zkeys[w]: -SN[frow, w]
                                for w in range(ndir) if SN[frow, w] != 0.0})
                for q in range(nsym):
                    if SP[frow, q] != 0.0:
                        expr = expr + (-SP[frow, q]) * xi_exprs[q]
                if mono == zero_mono:
                    expr = expr + (-kappa_i) * xi_exprs[p]
                    if a == b:
                        expr = expr - pi_i * pi_factor
                S.add_term(a, b, mono, expr)
            if a != b:
                S.entries[(b, a)] = {m: e.copy()
                                     for m, e in S.entries[(a, b)].items()}
        gram_blk = compile_sos_matrix(builder, S, gram_basis)

        # the trace objective pins the otherwise-free solution scale and
        # keeps the iterates off the upscaling ray
        problem = builder.build({xi_blk: np.eye(n)})
        return builder, xi_blk, gram_blk, gram_l0, zkeys, problem

    def usable(sol) -> bool:
        return sol.status in ("optimal", "feasible") or (
            sol.blocks is not None and sol.rel_primal <= 10.0 * sdp_tol)

    def attempt(pi_factor: float):
        builder, xi_blk, gram_blk, gram_l0, zkeys, problem = make_problem(pi_factor)
        sol = solve_sdp(problem, tol=sdp_tol, max_iter=max_iter,
                        stop_at_feasible=True)
        return (builder, xi_blk, gram_blk, gram_l0, zkeys), sol

    def plan(refs, sol, factor: float, target: float) -> tuple[float, float]:
        """Best downscale c and the alpha_lo it reaches, for one solution.

        Dividing (Xi, Phi) by c >= 1 multiplies both certified eigenvalue
        bounds by c and leaves the feedback law unchanged.  A solution
        certified at penalty ``factor * pi`` stays valid for the requested
        penalty up to c = factor -- the inflation itself pays for the
        move -- and beyond that the Gram constant block pays (c - factor)
        times the penalty out of its own smallest-eigenvalue slack.
        """
        builder, xi_blk, gram_blk, gram_l0, _ = refs
        Xi_v = builder.block_value(sol, xi_blk) + shift * np.eye(n)
        ev = np.linalg.eigvalsh(0.5 * (Xi_v + Xi_v.T))
        slack = 0.0
        if gram_l0 >= 0:
            Q = builder.block_value(sol, gram_blk)
            v0 = np.arange(gram_l0 * n, (gram_l0 + 1) * n)
            rest = np.setdiff1d(np.arange(Q.shape[0]), v0)
            Q00 = Q[np.ix_(v0, v0)]
            if rest.size:
                Q01 = Q[np.ix_(v0, rest)]
                Q11 = Q[np.ix_(rest, rest)]
                Q00 = Q00 - Q01 @ np.linalg.pinv(Q11, hermitian=True) @ Q01.T
            slack = max(0.0, float(np.linalg.eigvalsh(0.5 * (Q00 + Q00.T))[0]))
        c_valid = factor + 0.95 * slack / pi_i
        c_exact = float(ev[0]) / eps            # keep the inverse exact
        c = min(c_valid, c_exact, max(1.0, target * float(ev[-1])))
        c = max(1.0, c)
        return c, c / float(ev[-1])

    if alpha_target is None:
        alpha_target = 100.0 * coupling_gain(D, pi_i) / kappa_i

    # Climb the penalty one decade at a time.  Low rungs may be infeasible
    # at practical norms purely because of the eigenvalue floor (the floor
    # costs solution scale, and an inflated penalty is what pays for it),
    # so failures before the first success mean "climb", not "give up".
    # Once a rung succeeds, keep climbing only while the downscale it
    # affords cannot reach the target margin yet.
    refs = sol = None
    rescale, factor = 1.0, 1.0
    statuses = []
    for rung in range(13):
        refs2, sol2 = attempt(10.0 ** rung)
        statuses.append(sol2.status)
        if usable(sol2):
            refs, sol, factor = refs2, sol2, 10.0 ** rung
            if objective == "feasibility":
                break
            rescale, reach = plan(refs, sol, factor, alpha_target)
            if reach >= alpha_target:
                break
        elif refs is not None:
            break
    if refs is None:
        if "infeasible" in statuses:
            raise SdpInfeasibleError(
                f"no certificate exists for kappa={kappa_i}, pi={pi_i} with "
                f"these {T} samples; retry with a larger dataset or a smaller "
                "decay rate")
        raise SdpNumericalError(
            f"solver stopped with statuses {sorted(set(statuses))} "
            "across all penalty scales")

    builder, xi_blk, gram_blk, gram_l0, zkeys = refs
    Xi_blk = builder.block_value(sol, xi_blk)
    Xi = 0.5 * (Xi_blk + Xi_blk.T) + shift * np.eye(n)
    xi_vec = np.array([Xi[a, b] for a, b in sym_pairs])
    phi_flat = Pmap @ xi_vec
    if ndir:
        z_vec = np.array([builder.value(sol, LinExpr({k: 1.0})) for k in zkeys])
        phi_flat = phi_flat + N_eff @ z_vec
    phi_vals = phi_flat.reshape(T, n, L)

    # re-project the coefficients so the consistency identity holds to
    # machine precision (the solver leaves a residual at its tolerance)
    jstar = np.empty(N, dtype=int)
    gammas: list = [None] * N
    for (k, js), poly in trans.entries.items():
        jstar[k] = js
        gammas[k] = next(iter(poly))
    for l, mono in enumerate(phi_monos):
        target = np.zeros((N, n))
        for k in range(N):
            if gammas[k] == mono:
                target[k] = Xi[jstar[k]]
        resid = J @ phi_vals[:, :, l] - target
        correction = np.linalg.lstsq(J, resid, rcond=None)[0]
        phi_vals[:, :, l] -= correction

    if rescale > 1.0:
        # ride the scaling ray down: divides Xi and Phi together, which
        # keeps the consistency identity exact and the feedback law as is
        Xi = Xi / rescale
        phi_vals = phi_vals / rescale

    Phi = from_coeff_stack(phi_monos, phi_vals.transpose(2, 0, 1), n)
    evals, evecs = np.linalg.eigh(Xi)
    inv = 1.0 / np.maximum(evals, eps)
    P = evecs @ np.diag(inv) @ evecs.T
    P = 0.5 * (P + P.T)
    p_evals = np.linalg.eigvalsh(P)
    K = Phi.left_mul(traj.U0T).right_mul(P)
    return IssCertificate(P=P, Phi=Phi, Xi=Xi, kappa_i=float(kappa_i),
                          pi_i=float(pi_i), rho_i=coupling_gain(D, pi_i),
                          alpha_lo=float(p_evals[0]), alpha_hi=float(p_evals[-1]),
                          K=K, data_ref=traj.label)


def eval_certificate(cert: IssCertificate, x) -> tuple[float, np.ndarray]:
    """Value of the certificate at a state: (V(x), u(x))."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (cert.n,):
        raise SynthesisError(f"state has {x.size} entries, expected {cert.n}")
    V = float(x @ cert.P @ x)
    u = eval_polymatrix(cert.K, x) @ x
    return V, u


def lemma1_residual(cert: IssCertificate, traj: TrajectoryData, A, B, D,
                    points) -> float:
    """Max relative defect of the data-based closed-loop representation.

    Test-only oracle: compares the data-side expression against the true
    closed-loop vector field A*F(x) + B*K(x)x at the given states.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    D = np.asarray(D, dtype=float).reshape(cert.n, -1) if np.size(D) \
        else np.zeros((cert.n, 0))
    E = traj.X1T - D @ traj.W0T
    worst = 0.0
    for x in points:
        x = np.asarray(x, dtype=float).reshape(-1)
        G = eval_polymatrix(cert.Phi, x) @ cert.P
        lhs = E @ (G @ x)
        rhs = A @ eval_basis(traj.basis, x) + B @ (eval_polymatrix(cert.K, x) @ x)
        worst = max(worst, float(np.linalg.norm(lhs - rhs))
                    / (1.0 + float(np.linalg.norm(x))))
    return worst


# ---------------------------------------------------------------------------
# Plain-text certificate files


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _emit_polymatrix(lines: list, name: str, pm: PolyMatrix) -> None:
    cells = [(r, c, mono, coef)
             for (r, c) in sorted(pm.entries)
             for mono, coef in sorted(pm.entries[(r, c)].items(),
                                      key=lambda kv: (mono_degree(kv[0]), kv[0]))]
    lines.append(f"{name} {pm.rows} {pm.cols} {pm.nvars} {len(cells)}")
    for r, c, mono, coef in cells:
        lines.append(f"{r} {c} {_fmt(coef)} {mono_to_str(mono)}")


def save_certificate(cert: IssCertificate, path) -> None:
    lines = ["iss-certificate v1",
             f"kappa {_fmt(cert.kappa_i)}",
             f"pi {_fmt(cert.pi_i)}",
             f"rho {_fmt(cert.rho_i)}",
             f"alpha_lo {_fmt(cert.alpha_lo)}",
             f"alpha_hi {_fmt(cert.alpha_hi)}",
             f"data_ref {cert.data_ref}".rstrip()]
    for name, mat in (("P", cert.P), ("Xi", cert.Xi)):
        lines.append(f"{name} {mat.shape[0]}")
        for row in mat:
            lines.append(" ".join(_fmt(v) for v in row))
    _emit_polymatrix(lines, "Phi", cert.Phi)
    _emit_polymatrix(lines, "K", cert.K)
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")


def _parse_polymatrix(lines, lineno: int, name: str, path) -> tuple[PolyMatrix, int]:
    head = lines[lineno].split()
    if len(head) != 5 or head[0] != name:
        raise SynthesisError(f"{path}:{lineno + 1}: expected '{name}' table header")
    rows, cols, nvars, count = (int(v) for v in head[1:])
    entries: dict = {}
    for off in range(count):
        parts = lines[lineno + 1 + off].split()
        r, c, coef = int(parts[0]), int(parts[1]), float(parts[2])
        mono = mono_from_str(parts[3], nvars)
        entries.setdefault((r, c), {})[mono] = coef
    return PolyMatrix(rows, cols, nvars, entries), lineno + 1 + count


def load_certificate(path) -> IssCertificate:
    with open(path) as handle:
        lines = [ln.rstrip("\n") for ln in handle]
    if not lines or lines[0] != "iss-certificate v1":
        raise SynthesisError(f"{path}: not a certificate file")
    scalars = {}
    for i, key in enumerate(("kappa", "pi", "rho", "alpha_lo", "alpha_hi")):
        field_name, _, value = lines[1 + i].partition(" ")
        if field_name != key:
            raise SynthesisError(f"{path}:{i + 2}: expected '{key}'")
        scalars[key] = float(value)
    tag, _, data_ref = lines[6].partition(" ")
    if tag != "data_ref":
        raise SynthesisError(f"{path}:7: expected 'data_ref'")
    lineno = 7
    mats = {}
    for name in ("P", "Xi"):
        head = lines[lineno].split()
        if len(head) != 2 or head[0] != name:
            raise SynthesisError(f"{path}:{lineno + 1}: expected '{name}' block")
        dim = int(head[1])
        mats[name] = np.array(
            [[float(v) for v in lines[lineno + 1 + r].split()] for r in range(dim)])
        lineno += 1 + dim
    Phi, lineno = _parse_polymatrix(lines, lineno, "Phi", path)
    K, _ = _parse_polymatrix(lines, lineno, "K", path)
    return IssCertificate(P=mats["P"], Phi=Phi, Xi=mats["Xi"],
                          kappa_i=scalars["kappa"], pi_i=scalars["pi"],
                          rho_i=scalars["rho"], alpha_lo=scalars["alpha_lo"],
                          alpha_hi=scalars["alpha_hi"], K=K, data_ref=data_ref)
