"""Monomial bases and sparse polynomial matrices.

Everything downstream (data collection, SDP compilation, certificate
evaluation) works with vectors of monomials ``F(x)`` and with polynomial
matrices whose entries are sparse ``{exponent-tuple: coefficient}`` maps.
This module owns that small algebra layer, plus the factorization
``T(x) @ x == F(x)`` that rewrites a monomial vector as a polynomial matrix
acting on the state.

Conventions:

* A monomial over ``n`` variables is an exponent tuple of length ``n``.
* A basis lists monomials of degree >= 1, with the degree-1 monomials
  ``x1, ..., xn`` first (several constructions rely on that ordering, e.g.
  zero-padding of coupling blocks).
* Textual form uses 1-based variables: ``x1^2*x3``; the constant monomial
  is printed as ``1``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

Monomial = tuple[int, ...]


class BasisError(ValueError):
    """Raised for malformed bases or mismatched dimensions."""


def mono_degree(mono: Monomial) -> int:
    return sum(mono)


def mono_mul(a: Monomial, b: Monomial) -> Monomial:
    return tuple(ai + bi for ai, bi in zip(a, b))


def mono_to_str(mono: Monomial) -> str:
    """Render an exponent tuple, e.g. ``(2, 0, 1) -> "x1^2*x3"``."""
    parts = []
    for i, e in enumerate(mono):
        if e == 0:
            continue
        parts.append(f"x{i + 1}" if e == 1 else f"x{i + 1}^{e}")
    return "*".join(parts) if parts else "1"


def mono_from_str(text: str, n: int) -> Monomial:
    """Parse the textual monomial form produced by :func:`mono_to_str`."""
    text = text.strip()
    expo = [0] * n
    if text == "1":
        return tuple(expo)
    for factor in text.split("*"):
        factor = factor.strip()
        if "^" in factor:
            var, _, power = factor.partition("^")
            e = int(power)
        else:
            var, e = factor, 1
        if not var.startswith("x"):
            raise BasisError(f"cannot parse monomial factor {factor!r}")
        idx = int(var[1:]) - 1
        if not 0 <= idx < n:
            raise BasisError(f"variable {var} out of range for n={n}")
        expo[idx] += e
    return tuple(expo)


def monomials_up_to(n: int, d: int) -> list[Monomial]:
    """All monomials in n variables of total degree 0..d, graded-lex order."""
    out: list[Monomial] = []
    for g in range(d + 1):
        for combo in itertools.combinations_with_replacement(range(n), g):
            e = [0] * n
            for i in combo:
                e[i] += 1
            out.append(tuple(e))
    return out


@dataclass
class MonomialBasis:
    """An ordered selection of monomials used as the dictionary F(x).

    Treated as immutable after construction.
    """

    n: int
    entries: tuple[Monomial, ...]
    _exp: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise BasisError(f"need at least one variable, got n={self.n}")
        self.entries = tuple(tuple(int(e) for e in m) for m in self.entries)
        if len(set(self.entries)) != len(self.entries):
            raise BasisError("duplicate monomials in basis")
        if len(self.entries) < self.n:
            raise BasisError("basis must contain at least the degree-1 monomials")
        for m in self.entries:
            if len(m) != self.n:
                raise BasisError(f"monomial {m} has wrong arity for n={self.n}")
            if mono_degree(m) < 1:
                raise BasisError(f"constant monomial {m} not allowed in a basis")
            if any(e < 0 for e in m):
                raise BasisError(f"negative exponent in {m}")
        for j in range(self.n):
            want = tuple(1 if i == j else 0 for i in range(self.n))
            if self.entries[j] != want:
                raise BasisError(
                    "the first n basis entries must be x1,...,xn in order; "
                    f"entry {j} is {mono_to_str(self.entries[j])}"
                )
        self._exp = np.array(self.entries, dtype=float)

    @property
    def N(self) -> int:
        return len(self.entries)

    @property
    def exponents(self) -> np.ndarray:
        """(N, n) exponent matrix, float dtype for broadcasting in powers."""
        return self._exp

    @property
    def max_degree(self) -> int:
        return max(mono_degree(m) for m in self.entries)

    def index(self, mono: Monomial) -> int:
        return self.entries.index(tuple(mono))

    def __contains__(self, mono) -> bool:
        return tuple(mono) in self.entries


def make_basis(n: int, d: int) -> MonomialBasis:
    """Full monomial basis of degrees 1..d in graded-lex order.

    N = C(n + d, d) - 1.  Degree-1 monomials come first, so the identity
    block convention for the transformation matrix holds automatically.
    """
    if n < 1 or d < 1:
        raise BasisError(f"make_basis requires n >= 1 and d >= 1, got ({n}, {d})")
    entries = [m for m in monomials_up_to(n, d) if mono_degree(m) >= 1]
    return MonomialBasis(n, tuple(entries))


def eval_basis(basis: MonomialBasis, x) -> np.ndarray:
    """Evaluate F(x) at a point: returns shape (N,)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (basis.n,):
        raise BasisError(f"state has shape {x.shape}, expected ({basis.n},)")
    return np.prod(x[None, :] ** basis.exponents, axis=1)


def eval_basis_cols(basis: MonomialBasis, X: np.ndarray) -> np.ndarray:
    """Column-wise basis evaluation: X is (n, T) -> (N, T)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != basis.n:
        raise BasisError(f"state trajectory has shape {X.shape}, expected ({basis.n}, T)")
    # (N, n, T) powers reduced over the variable axis
    return np.prod(X[None, :, :] ** basis.exponents[:, :, None], axis=1)


# ---------------------------------------------------------------------------
# Polynomial matrices


def _canon_entries(entries) -> dict:
    out = {}
    for (r, c), poly in entries.items():
        clean = {tuple(m): float(v) for m, v in poly.items() if v != 0.0}
        if clean:
            out[(int(r), int(c))] = clean
    return out


@dataclass
class PolyMatrix:
    """Sparse matrix with polynomial entries.

    ``entries[(r, c)]`` maps exponent tuples to coefficients; absent entries
    are zero, and zero coefficients are pruned on construction so equal
    polynomials have equal representations.  Treated as immutable.
    """

    rows: int
    cols: int
    nvars: int
    entries: dict

    def __post_init__(self):
        self.entries = _canon_entries(self.entries)
        for (r, c), poly in self.entries.items():
            if not (0 <= r < self.rows and 0 <= c < self.cols):
                raise BasisError(f"entry index ({r}, {c}) outside {self.rows}x{self.cols}")
            for m in poly:
                if len(m) != self.nvars:
                    raise BasisError(f"monomial {m} has wrong arity for nvars={self.nvars}")

    @classmethod
    def zero(cls, rows: int, cols: int, nvars: int) -> "PolyMatrix":
        return cls(rows, cols, nvars, {})

    @classmethod
    def constant(cls, mat: np.ndarray, nvars: int) -> "PolyMatrix":
        mat = np.asarray(mat, dtype=float)
        one = tuple([0] * nvars)
        entries = {
            (r, c): {one: mat[r, c]}
            for r in range(mat.shape[0])
            for c in range(mat.shape[1])
            if mat[r, c] != 0.0
        }
        return cls(mat.shape[0], mat.shape[1], nvars, entries)

    def monomials(self) -> list[Monomial]:
        """Sorted list (graded-lex) of monomials appearing anywhere."""
        monos = {m for poly in self.entries.values() for m in poly}
        return sorted(monos, key=lambda m: (mono_degree(m), tuple(-e for e in m)))

    def degree(self) -> int:
        return max((mono_degree(m) for poly in self.entries.values() for m in poly), default=0)

    def coefficient(self, r: int, c: int, mono: Monomial) -> float:
        return self.entries.get((r, c), {}).get(tuple(mono), 0.0)

    def transpose(self) -> "PolyMatrix":
        return PolyMatrix(
            self.cols, self.rows, self.nvars,
            {(c, r): dict(poly) for (r, c), poly in self.entries.items()},
        )

    def scale(self, a: float) -> "PolyMatrix":
        return PolyMatrix(
            self.rows, self.cols, self.nvars,
            {rc: {m: a * v for m, v in poly.items()} for rc, poly in self.entries.items()},
        )

    def add(self, other: "PolyMatrix") -> "PolyMatrix":
        if (self.rows, self.cols, self.nvars) != (other.rows, other.cols, other.nvars):
            raise BasisError("shape mismatch in PolyMatrix.add")
        entries: dict = {rc: dict(poly) for rc, poly in self.entries.items()}
        for rc, poly in other.entries.items():
            tgt = entries.setdefault(rc, {})
            for m, v in poly.items():
                tgt[m] = tgt.get(m, 0.0) + v
        return PolyMatrix(self.rows, self.cols, self.nvars, entries)

    def left_mul(self, mat: np.ndarray) -> "PolyMatrix":
        """Constant matrix times polynomial matrix: mat @ self."""
        mat = np.asarray(mat, dtype=float)
        if mat.shape[1] != self.rows:
            raise BasisError("shape mismatch in left_mul")
        entries: dict = {}
        for (r, c), poly in self.entries.items():
            col = mat[:, r]
            for i in np.nonzero(col)[0]:
                tgt = entries.setdefault((int(i), c), {})
                for m, v in poly.items():
                    tgt[m] = tgt.get(m, 0.0) + col[i] * v
        return PolyMatrix(mat.shape[0], self.cols, self.nvars, entries)

    def right_mul(self, mat: np.ndarray) -> "PolyMatrix":
        """Polynomial matrix times constant matrix: self @ mat."""
        mat = np.asarray(mat, dtype=float)
        if mat.shape[0] != self.cols:
            raise BasisError("shape mismatch in right_mul")
        entries: dict = {}
        for (r, c), poly in self.entries.items():
            row = mat[c, :]
            for j in np.nonzero(row)[0]:
                tgt = entries.setdefault((r, int(j)), {})
                for m, v in poly.items():
                    tgt[m] = tgt.get(m, 0.0) + row[j] * v
        return PolyMatrix(self.rows, mat.shape[1], self.nvars, entries)


def eval_polymatrix(pm: PolyMatrix, x) -> np.ndarray:
    """Evaluate a polynomial matrix at a point: returns (rows, cols)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (pm.nvars,):
        raise BasisError(f"state has shape {x.shape}, expected ({pm.nvars},)")
    out = np.zeros((pm.rows, pm.cols))
    for (r, c), poly in pm.entries.items():
        acc = 0.0
        for m, v in poly.items():
            acc += v * np.prod(x ** np.asarray(m))
        out[r, c] = acc
    return out


def eval_polymatrix_cols(pm: PolyMatrix, X: np.ndarray) -> np.ndarray:
    """Batched evaluation: X is (nvars, B) -> (rows, cols, B)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != pm.nvars:
        raise BasisError(f"points have shape {X.shape}, expected ({pm.nvars}, B)")
    monos = pm.monomials()
    if not monos:
        return np.zeros((pm.rows, pm.cols, X.shape[1]))
    exps = np.array(monos, dtype=float)                      # (L, nvars)
    vals = np.prod(X[None, :, :] ** exps[:, :, None], axis=1)  # (L, B)
    tensor = coeff_stack(pm, monos)                          # (L, rows, cols)
    return np.einsum("lrc,lb->rcb", tensor, vals)


def coeff_stack(pm: PolyMatrix, monos: list[Monomial]) -> np.ndarray:
    """Dense (len(monos), rows, cols) coefficient tensor; monomials not
    listed must not appear in pm."""
    index = {tuple(m): i for i, m in enumerate(monos)}
    out = np.zeros((len(monos), pm.rows, pm.cols))
    for (r, c), poly in pm.entries.items():
        for m, v in poly.items():
            if m not in index:
                raise BasisError(f"monomial {mono_to_str(m)} missing from coefficient stack")
            out[index[m], r, c] = v
    return out


def from_coeff_stack(monos: list[Monomial], tensor: np.ndarray, nvars: int,
                     tol: float = 0.0) -> PolyMatrix:
    """Inverse of :func:`coeff_stack`; coefficients with |v| <= tol dropped."""
    tensor = np.asarray(tensor, dtype=float)
    _, rows, cols = tensor.shape
    entries: dict = {}
    for k, m in enumerate(monos):
        rr, cc = np.nonzero(np.abs(tensor[k]) > tol)
        for r, c in zip(rr, cc):
            entries.setdefault((int(r), int(c)), {})[tuple(m)] = float(tensor[k, r, c])
    return PolyMatrix(rows, cols, nvars, entries)


# ---------------------------------------------------------------------------
# State transformation  T(x) @ x == F(x)


def build_transformation(basis: MonomialBasis) -> PolyMatrix:
    """Factor the monomial vector through the state: ``T(x) @ x == F(x)``.

    Row k of T(x) has a single entry: for basis monomial ``x^a`` the entry
    sits in column ``j*`` (the smallest variable index with ``a[j*] >= 1``)
    and equals the monomial ``x^(a - e_{j*})``.  With degree-1 monomials
    first, the top n x n block is the identity.
    """
    entries = {}
    for k, mono in enumerate(basis.entries):
        jstar = next(j for j, e in enumerate(mono) if e >= 1)
        rem = tuple(e - 1 if j == jstar else e for j, e in enumerate(mono))
        entries[(k, jstar)] = {rem: 1.0}
    return PolyMatrix(basis.N, basis.n, basis.n, entries)


def polymatrix_times_x(pm: PolyMatrix) -> list[dict]:
    """Symbolic product ``pm(x) @ x``: one {monomial: coef} map per row.

    Used to check transformation matrices against their basis without
    numeric sampling.
    """
    rows: list[dict] = [dict() for _ in range(pm.rows)]
    for (r, c), poly in pm.entries.items():
        xc = tuple(1 if j == c else 0 for j in range(pm.nvars))
        for m, v in poly.items():
            prod = mono_mul(m, xc)
            rows[r][prod] = rows[r].get(prod, 0.0) + v
    return [{m: v for m, v in row.items() if v != 0.0} for row in rows]
