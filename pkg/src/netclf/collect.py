"""Experiment generation: excite a subsystem, integrate it, package data matrices.

The synthesis pipeline never sees the plant coefficients; everything it is
allowed to know about a subsystem lives in a :class:`TrajectoryData` bundle
(inputs, adversarial samples, states, state derivatives) plus the monomial
basis used to lift the states.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .plant import Subsystem
from .poly import MonomialBasis, eval_basis_cols


class CollectError(Exception):
    """Raised for invalid experiment requests or malformed trajectory files."""


class DivergedError(CollectError):
    """Raised when the open-loop state blows up during integration."""


@dataclass(frozen=True)
class TrajectoryData:
    """One input-state experiment, sampled at a fixed period.

    All matrices are column-per-sample.  ``X1T`` holds state derivatives,
    either evaluated exactly on the plant or approximated by forward
    differences, depending on how the experiment was run.
    """

    basis: MonomialBasis
    U0T: np.ndarray
    W0T: np.ndarray
    X0T: np.ndarray
    X1T: np.ndarray
    tau: float
    t0: float = 0.0
    label: str = ""
    J0T: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        for name in ("U0T", "W0T", "X0T", "X1T"):
            mat = np.asarray(getattr(self, name), dtype=float)
            if mat.ndim != 2:
                raise CollectError(f"{name} must be a 2-D array")
            object.__setattr__(self, name, mat)
        T = self.X0T.shape[1]
        for name in ("U0T", "W0T", "X1T"):
            if getattr(self, name).shape[1] != T:
                raise CollectError(f"{name} has {getattr(self, name).shape[1]} "
                                   f"columns, expected {T}")
        if self.X0T.shape[0] != self.basis.n or self.X1T.shape[0] != self.basis.n:
            raise CollectError("state rows do not match basis dimension")
        if not self.tau > 0:
            raise CollectError("sampling period must be positive")
        if self.J0T is None:
            object.__setattr__(self, "J0T", build_monomial_traj(self.basis, self.X0T))
        elif self.J0T.shape != (self.basis.N, T):
            raise CollectError("J0T shape does not match basis and sample count")

    @property
    def T(self) -> int:
        return self.X0T.shape[1]


def _first_primes(count: int) -> np.ndarray:
    primes: list[int] = []
    candidate = 2
    while len(primes) < count:
        if all(candidate % p for p in primes):
            primes.append(candidate)
        candidate += 1
    return np.array(primes, dtype=float)


def generate_excitation(kind: str, seed: int, m: int, T: int,
                        amplitude: float = 1.0) -> np.ndarray:
    """Deterministic m-channel probing signal, one column per sample.

    ``uniform-random`` draws i.i.d. from [-amplitude, amplitude];
    ``multisine`` sums incommensurate sinusoids with random phases and
    rescales every channel to peak at the amplitude.
    """
    if T < 1:
        raise CollectError("need at least one sample")
    if amplitude == 0.0:
        raise CollectError("zero amplitude cannot excite the plant")
    amplitude = abs(amplitude)
    rng = np.random.default_rng(seed)
    if kind == "uniform-random":
        return rng.uniform(-amplitude, amplitude, size=(m, T))
    if kind == "multisine":
        tones = math.ceil(m * T / 4)
        freqs = np.sqrt(_first_primes(tones))          # pairwise incommensurate
        phases = rng.uniform(0.0, 2.0 * np.pi, size=(m, tones))
        t = np.arange(T, dtype=float)
        signal = np.empty((m, T))
        for i in range(m):
            signal[i] = np.sin(np.outer(freqs, t) + phases[i][:, None]).sum(axis=0)
            peak = np.abs(signal[i]).max()
            if peak > 0.0:
                signal[i] *= amplitude / peak
        return signal
    raise CollectError(f"unknown excitation kind {kind!r}")


def simulate_subsystem(sub: Subsystem, x0, inputs, w_source=None, *,
                       tau: float = 0.01, substeps: int = 20,
                       derivative_mode: str = "exact", t0: float = 0.0,
                       label: str = "") -> TrajectoryData:
    """Integrate one subsystem open loop and record the four data matrices.

    Inputs and adversarial samples are held constant over each sampling
    interval (zero-order hold); integration uses classical fourth-order
    Runge-Kutta with ``substeps`` stages per interval.  ``derivative_mode``
    selects how X1T is produced: ``exact`` evaluates the plant right-hand
    side at every sample, ``finite-difference`` uses (x(t+tau)-x(t))/tau.
    """
    if substeps < 1:
        raise CollectError("substeps must be at least 1")
    if derivative_mode not in ("exact", "finite-difference"):
        raise CollectError(f"unknown derivative mode {derivative_mode!r}")
    U = np.atleast_2d(np.asarray(inputs, dtype=float))
    if U.shape[0] != sub.m:
        raise CollectError(f"inputs must have {sub.m} rows, got {U.shape[0]}")
    T = U.shape[1]
    if w_source is None:
        W = np.zeros((sub.sigma, T))
    else:
        W = np.atleast_2d(np.asarray(w_source, dtype=float))
        if W.shape != (sub.sigma, T):
            raise CollectError(f"w_source must be {sub.sigma}x{T}, got {W.shape}")

    x = np.asarray(x0, dtype=float).reshape(sub.n).copy()
    X0 = np.empty((sub.n, T))
    X1 = np.empty((sub.n, T))
    h = tau / substeps
    for k in range(T):
        if not np.all(np.isfinite(x)):
            raise DivergedError(f"state diverged at sample {k}")
        X0[:, k] = x
        u_k, w_k = U[:, k], W[:, k]
        if derivative_mode == "exact":
            X1[:, k] = sub.vector_field(x, u_k, w_k)
        for _ in range(substeps):
            k1 = sub.vector_field(x, u_k, w_k)
            k2 = sub.vector_field(x + 0.5 * h * k1, u_k, w_k)
            k3 = sub.vector_field(x + 0.5 * h * k2, u_k, w_k)
            k4 = sub.vector_field(x + h * k3, u_k, w_k)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise DivergedError(f"state diverged at sample {k}")
        if derivative_mode == "finite-difference":
            X1[:, k] = (x - X0[:, k]) / tau
    return TrajectoryData(sub.basis, U, W, X0, X1, tau, t0=t0, label=label)


def build_monomial_traj(basis: MonomialBasis, X0T) -> np.ndarray:
    X0T = np.atleast_2d(np.asarray(X0T, dtype=float))
    if X0T.shape[0] != basis.n:
        raise CollectError(f"states must have {basis.n} rows, got {X0T.shape[0]}")
    return eval_basis_cols(basis, X0T)


@dataclass(frozen=True)
class RankReport:
    """Outcome of the data-richness gate on the monomial trajectory."""

    ok: bool
    rank: int
    condition: float
    sigma_min: float
    sigma_max: float
    rows: int
    samples: int

    def __str__(self) -> str:
        verdict = "full row rank" if self.ok else "RANK DEFICIENT"
        return (f"{verdict}: rank {self.rank}/{self.rows} from {self.samples} "
                f"samples, condition {self.condition:.3e}")


def check_rank(J0T, rtol: float = 1e-8) -> RankReport:
    """Numerical full-row-rank check; diagnostic only, never raises."""
    J0T = np.atleast_2d(np.asarray(J0T, dtype=float))
    N, T = J0T.shape
    svals = np.linalg.svd(J0T, compute_uv=False)
    s_max = float(svals[0]) if svals.size else 0.0
    s_min = float(svals[N - 1]) if svals.size >= N else 0.0
    rank = int(np.sum(svals > rtol * s_max)) if s_max > 0.0 else 0
    cond = s_max / s_min if s_min > 0.0 else math.inf
    ok = T > N and s_min > rtol * s_max
    return RankReport(ok, rank, cond, s_min, s_max, N, T)


def export_csv(traj: TrajectoryData, path) -> None:
    """Write one row per sample: t, inputs, adversarial samples, states, derivatives."""
    m, sigma, n = traj.U0T.shape[0], traj.W0T.shape[0], traj.X0T.shape[0]
    header = (["t"]
              + [f"u{i + 1}" for i in range(m)]
              + [f"w{i + 1}" for i in range(sigma)]
              + [f"x{i + 1}" for i in range(n)]
              + [f"dx{i + 1}" for i in range(n)])
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for k in range(traj.T):
            row = np.concatenate(([traj.t0 + k * traj.tau], traj.U0T[:, k],
                                  traj.W0T[:, k], traj.X0T[:, k], traj.X1T[:, k]))
            writer.writerow([f"{v:.17g}" for v in row])


def import_csv(path, basis: MonomialBasis, label: str = "") -> TrajectoryData:
    """Read a trajectory written by :func:`export_csv`.

    The sampling period is recovered from the time column, so the file must
    contain at least two samples.
    """
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise CollectError(f"{path}: empty trajectory file") from None
        rows = [[float(v) for v in row] for row in reader if row]
    m = sum(1 for name in header if name.startswith("u"))
    sigma = sum(1 for name in header if name.startswith("w"))
    n = sum(1 for name in header if name.startswith("x"))
    expected = (["t"]
                + [f"u{i + 1}" for i in range(m)]
                + [f"w{i + 1}" for i in range(sigma)]
                + [f"x{i + 1}" for i in range(n)]
                + [f"dx{i + 1}" for i in range(n)])
    if header != expected:
        raise CollectError(f"{path}: unexpected trajectory header {header}")
    if n != basis.n:
        raise CollectError(f"{path}: file has {n} states, basis expects {basis.n}")
    if len(rows) < 2:
        raise CollectError(f"{path}: need at least two samples to recover "
                           "the sampling period")
    data = np.asarray(rows, dtype=float)
    t = data[:, 0]
    tau = float(t[1] - t[0])
    if tau <= 0 or not np.allclose(np.diff(t), tau, rtol=1e-9, atol=1e-12):
        raise CollectError(f"{path}: time column is not uniformly spaced")
    cols = np.cumsum([1, m, sigma, n, n])
    return TrajectoryData(basis,
                          data[:, cols[0]:cols[1]].T.copy(),
                          data[:, cols[1]:cols[2]].T.copy(),
                          data[:, cols[2]:cols[3]].T.copy(),
                          data[:, cols[3]:cols[4]].T.copy(),
                          tau, t0=float(t[0]), label=label)
