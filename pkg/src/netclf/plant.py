"""Ground-truth plant models: subsystems, topologies, assembled networks.

A subsystem is a polynomial control system

    xdot_i = A_i F_i(x_i) + B_i u_i + D_i w_i,      F_i(0) = 0,

where ``F_i`` is the subsystem's monomial vector, ``w_i`` stacks the states
of its in-neighbors, and ``D_i`` concatenates the known coupling blocks
``D_ij`` (source order).  ``A_i`` and ``B_i`` are treated as unknown by the
synthesis path: they are only touched by the simulation oracle in this
module and by test assertions.  Networks substitute ``w_ij = x_j`` and fold
the couplings into one big ``A`` matrix whose off-diagonal blocks are the
zero-padded ``[D_ij 0]`` (padding is valid because every basis lists the
degree-1 monomials first).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .poly import MonomialBasis, eval_basis, make_basis

TOPOLOGY_KINDS = ("fully-connected", "ring", "star", "line", "binary-tree", "custom")


class PlantError(ValueError):
    """Raised for malformed subsystems, topologies, or assemblies."""


@dataclass
class Subsystem:
    """One node of the network.  A and B are hidden dynamics: code outside
    this module's oracle and the tests must not read them."""

    n: int
    m: int
    basis: MonomialBasis
    A: np.ndarray
    B: np.ndarray
    in_edges: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        if self.basis.n != self.n:
            raise PlantError(f"basis arity {self.basis.n} != state dim {self.n}")
        if self.A.shape != (self.n, self.basis.N):
            raise PlantError(f"A has shape {self.A.shape}, expected ({self.n}, {self.basis.N})")
        if self.B.shape != (self.n, self.m):
            raise PlantError(f"B has shape {self.B.shape}, expected ({self.n}, {self.m})")
        self.in_edges = {int(j): np.asarray(Dij, dtype=float) for j, Dij in self.in_edges.items()}
        for j, Dij in self.in_edges.items():
            if Dij.ndim != 2 or Dij.shape[0] != self.n:
                raise PlantError(f"coupling block from {j} has shape {Dij.shape}")

    @property
    def sources(self) -> list[int]:
        return sorted(self.in_edges)

    @property
    def sigma(self) -> int:
        return sum(self.in_edges[j].shape[1] for j in self.sources)

    @property
    def D(self) -> np.ndarray:
        """Concatenated coupling matrix (n, sigma), source-id order."""
        if not self.in_edges:
            return np.zeros((self.n, 0))
        return np.hstack([self.in_edges[j] for j in self.sources])

    def vector_field(self, x, u=None, w=None) -> np.ndarray:
        """Simulation oracle: A F(x) + B u + D w."""
        x = np.asarray(x, dtype=float)
        out = self.A @ eval_basis(self.basis, x)
        if u is not None:
            out = out + self.B @ np.asarray(u, dtype=float)
        if w is not None and self.sigma:
            out = out + self.D @ np.asarray(w, dtype=float)
        return out

    def with_basis(self, basis: MonomialBasis) -> "Subsystem":
        """Re-express the hidden A over a superset basis (extra monomials
        get zero columns)."""
        if basis.n != self.n:
            raise PlantError("replacement basis has wrong arity")
        Anew = np.zeros((self.n, basis.N))
        for k, mono in enumerate(self.basis.entries):
            if mono not in basis:
                raise PlantError(f"replacement basis is missing native monomial {mono}")
            Anew[:, basis.index(mono)] = self.A[:, k]
        return Subsystem(self.n, self.m, basis, Anew, self.B.copy(),
                         {j: D.copy() for j, D in self.in_edges.items()})


@dataclass
class Topology:
    M: int
    kind: str
    edges: frozenset

    def __post_init__(self):
        if self.kind not in TOPOLOGY_KINDS:
            raise PlantError(f"unknown topology kind {self.kind!r}")
        self.edges = frozenset((int(j), int(i)) for j, i in self.edges)
        for j, i in self.edges:
            if j == i:
                raise PlantError(f"self-edge {j}->{i} not allowed")
            if not (1 <= j <= self.M and 1 <= i <= self.M):
                raise PlantError(f"edge {j}->{i} outside 1..{self.M}")

    def in_neighbors(self, i: int) -> list[int]:
        return sorted(j for j, k in self.edges if k == i)

    def out_neighbors(self, j: int) -> list[int]:
        return sorted(i for k, i in self.edges if k == j)


def build_topology(kind: str, M: int, edges=None) -> Topology:
    """Standard interconnection patterns; ids are 1-based.

    ring: j = i-1 cyclically (M >= 2); star: hub 1 feeds all; line: j = i-1;
    binary-tree: j feeds 2j and 2j+1, M = 2^l - 1; custom: explicit edges.
    """
    if M < 1:
        raise PlantError(f"M must be >= 1, got {M}")
    if kind == "none":  # convenience alias for an uncoupled collection
        return Topology(M, "custom", frozenset())
    if kind == "custom":
        return Topology(M, "custom", frozenset(edges or ()))
    if kind == "fully-connected":
        e = {(j, i) for j in range(1, M + 1) for i in range(1, M + 1) if j != i}
    elif kind == "ring":
        if M < 2:
            raise PlantError("ring topology requires M >= 2")
        e = {((i - 2) % M + 1, i) for i in range(1, M + 1)}
    elif kind == "star":
        e = {(1, i) for i in range(2, M + 1)}
    elif kind == "line":
        e = {(i - 1, i) for i in range(2, M + 1)}
    elif kind == "binary-tree":
        levels = (M + 1).bit_length() - 1
        if 2**levels - 1 != M:
            raise PlantError(f"binary-tree requires M = 2^l - 1, got {M}")
        e = set()
        for j in range(1, M + 1):
            for child in (2 * j, 2 * j + 1):
                if child <= M:
                    e.add((j, child))
    else:
        raise PlantError(f"unknown topology kind {kind!r}")
    return Topology(M, kind, frozenset(e))


@dataclass
class Network:
    """Assembled interconnection; immutable after construction."""

    subsystems: list[Subsystem]
    topology: Topology
    A: np.ndarray
    B: np.ndarray
    state_offsets: list[int]
    basis_offsets: list[int]
    input_offsets: list[int]

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def state_slice(self, i: int) -> slice:
        """1-based subsystem id -> its slice of the stacked state."""
        return slice(self.state_offsets[i - 1], self.state_offsets[i])

    def input_slice(self, i: int) -> slice:
        return slice(self.input_offsets[i - 1], self.input_offsets[i])

    def monomials(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise PlantError(f"state has shape {x.shape}, expected ({self.n},)")
        parts = []
        for i, sub in enumerate(self.subsystems):
            xi = x[self.state_offsets[i]:self.state_offsets[i + 1]]
            parts.append(eval_basis(sub.basis, xi))
        return np.concatenate(parts)


def assemble_network(subsystems: list[Subsystem], topology: Topology) -> Network:
    """Fold coupling blocks into one network matrix pair (A, B)."""
    M = topology.M
    if len(subsystems) != M:
        raise PlantError(f"{len(subsystems)} subsystems for topology with M={M}")
    ns = [s.n for s in subsystems]
    Ns = [s.basis.N for s in subsystems]
    ms = [s.m for s in subsystems]
    so = np.concatenate([[0], np.cumsum(ns)]).tolist()
    bo = np.concatenate([[0], np.cumsum(Ns)]).tolist()
    io = np.concatenate([[0], np.cumsum(ms)]).tolist()
    A = np.zeros((so[-1], bo[-1]))
    B = np.zeros((so[-1], io[-1]))
    for i, sub in enumerate(subsystems):
        A[so[i]:so[i + 1], bo[i]:bo[i + 1]] = sub.A
        B[so[i]:so[i + 1], io[i]:io[i + 1]] = sub.B
    for j, i in sorted(topology.edges):
        sub = subsystems[i - 1]
        if j not in sub.in_edges:
            raise PlantError(f"edge {j}->{i} declared but subsystem {i} has no D block for {j}")
        Dij = sub.in_edges[j]
        nj = subsystems[j - 1].n
        if Dij.shape != (sub.n, nj):
            raise PlantError(
                f"coupling block {j}->{i} has shape {Dij.shape}, expected ({sub.n}, {nj})"
            )
        # pad with zeros over the nonlinear monomials of subsystem j
        A[so[i - 1]:so[i], bo[j - 1]:bo[j - 1] + nj] += Dij
    return Network(list(subsystems), topology, A, B, so, bo, io)


def network_vector_field(net: Network, x, u=None) -> np.ndarray:
    """xdot = A F(x) + B u for the assembled network."""
    out = net.A @ net.monomials(x)
    if u is not None:
        u = np.asarray(u, dtype=float)
        if u.shape != (net.m,):
            raise PlantError(f"input has shape {u.shape}, expected ({net.m},)")
        out = out + net.B @ u
    return out


# ---------------------------------------------------------------------------
# Benchmark families


SPACECRAFT_COUPLING = np.array([[0.0, 0.0, -1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
ACADEMIC_COUPLING = np.array([[1.0, 0.0], [0.0, 0.0]])

DEFAULT_COUPLING_WEIGHT = {"spacecraft": 1e-4, "academic": 1e-2, "lu": 1e-3}

# monomial dictionaries the synthesis stage uses by default (supersets of
# the native dictionaries below)
def default_synthesis_basis(name: str) -> MonomialBasis:
    if name == "spacecraft":
        return make_basis(3, 2)
    if name == "academic":
        return make_basis(2, 2)
    if name == "lu":
        return MonomialBasis(3, (
            (1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 0), (0, 1, 1),
        ))
    raise PlantError(f"unknown benchmark {name!r}")


def _spacecraft_subsystem(inertia) -> tuple[MonomialBasis, np.ndarray, np.ndarray]:
    J1, J2, J3 = (float(v) for v in inertia)
    basis = MonomialBasis(3, (
        (1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 1, 1), (1, 0, 1), (1, 1, 0),
    ))
    A = np.zeros((3, 6))
    A[0, 3] = (J2 - J3) / J1
    A[1, 4] = (J3 - J1) / J2
    A[2, 5] = (J1 - J2) / J3
    B = np.diag([1.0 / J1, 1.0 / J2, 1.0 / J3])
    return basis, A, B


def _academic_subsystem() -> tuple[MonomialBasis, np.ndarray, np.ndarray]:
    basis = MonomialBasis(2, ((1, 0), (0, 1), (2, 0)))
    A = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    B = np.array([[0.0], [1.0]])
    return basis, A, B


def _lu_subsystem() -> tuple[MonomialBasis, np.ndarray, np.ndarray]:
    basis = MonomialBasis(3, ((1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 0)))
    A = np.array([
        [-36.0, 36.0, 0.0, 0.0, 0.0],
        [0.0, 28.0, 0.0, -1.0, 0.0],
        [0.0, 0.0, -20.0, 0.0, 1.0],
    ])
    B = np.array([[0.0], [1.0], [0.0]])
    return basis, A, B


def benchmark_catalog(name: str, M: int, topology, coupling: float | None = None,
                      inertia=(1.0, 1.2, 1.5)) -> tuple[list[Subsystem], Topology]:
    """Instantiate one of the three benchmark families on a topology.

    `topology` is a kind name (or "none", or a Topology).  The identical
    coupling block is attached for every in-edge; `coupling` overrides the
    family's default weight.
    """
    if name == "spacecraft":
        basis, A, B = _spacecraft_subsystem(inertia)
        pattern = SPACECRAFT_COUPLING
    elif name == "academic":
        basis, A, B = _academic_subsystem()
        pattern = ACADEMIC_COUPLING
    elif name == "lu":
        basis, A, B = _lu_subsystem()
        pattern = -np.eye(3)
    else:
        raise PlantError(f"unknown benchmark {name!r}")
    weight = DEFAULT_COUPLING_WEIGHT[name] if coupling is None else float(coupling)
    block = weight * pattern

    topo = topology if isinstance(topology, Topology) else build_topology(topology, M)
    if topo.M != M:
        raise PlantError(f"topology has M={topo.M}, expected {M}")
    subs = []
    for i in range(1, M + 1):
        in_edges = {j: block.copy() for j in topo.in_neighbors(i)}
        subs.append(Subsystem(basis.n, B.shape[1], basis, A.copy(), B.copy(), in_edges))
    return subs, topo
