"""Markov-chain Monte Carlo matrix inversion (MCMC-MI) preconditioner.

The system matrix is perturbed to A_hat = A + alpha * diag(A) and split as
A_hat = D_hat (I - T).  Rows of (I - T)^-1 = sum_k T^k are estimated with
random walks whose transition probabilities are proportional to |t_ij|
(Monte Carlo Almost-Optimal sampling); the preconditioner is
P = (I - T)^-1 D_hat^-1, sparsified row by row.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numba
import numpy as np
from numba import njit, prange

from .krylov import Solver
from .rng import counter_uniform
from .sparse import SparseMatrix

__all__ = [
    "McmcFixedSettings",
    "McmcParams",
    "PreconditionerBuildReport",
    "build_preconditioner",
    "chain_budget",
    "perturb",
    "row_fill_budget",
    "splitting",
]

_PROBABLE_ERROR = 0.6745
_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class McmcParams:
    alpha: float
    epsilon: float
    delta: float
    solver: Solver = Solver.GMRES

    def __post_init__(self):
        object.__setattr__(self, "solver", Solver.parse(self.solver))
        for name in ("alpha", "epsilon", "delta"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.alpha >= 0.0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "epsilon": self.epsilon, "delta": self.delta, "solver": self.solver.value}

    @classmethod
    def from_dict(cls, d) -> "McmcParams":
        return cls(d["alpha"], d["epsilon"], d["delta"], d.get("solver", "gmres"))


@dataclass(frozen=True)
class McmcFixedSettings:
    # None disables the per-row sparsification of P
    fill_factor_multiplier: float | None = 2.0
    truncation_threshold: float = 1e-9
    chain_count_cap: int = 1_000_000
    walk_length_cap: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.fill_factor_multiplier is not None and self.fill_factor_multiplier <= 0:
            raise ValueError("fill_factor_multiplier must be positive")
        if self.truncation_threshold <= 0:
            raise ValueError("truncation_threshold must be positive")
        if self.chain_count_cap < 1 or self.walk_length_cap < 1:
            raise ValueError("chain and walk caps must be >= 1")

    def with_seed(self, seed: int) -> "McmcFixedSettings":
        d = asdict(self)
        d["seed"] = seed
        return McmcFixedSettings(**d)


@dataclass
class PreconditionerBuildReport:
    P: SparseMatrix
    chains_per_row: int
    max_walk_len: int
    spectral_bound: float
    build_wall_time: float
    degenerate: bool

    def to_dict(self) -> dict:
        return {
            "n": self.P.nrows,
            "nnz": self.P.nnz,
            "chains_per_row": self.chains_per_row,
            "max_walk_len": self.max_walk_len,
            "spectral_bound": self.spectral_bound,
            "build_wall_time": self.build_wall_time,
            "degenerate": self.degenerate,
        }


def perturb(A: SparseMatrix, alpha: float) -> SparseMatrix:
    """A + alpha * diag(A)."""
    diag = A.diagonal()
    zero = np.flatnonzero(diag == 0.0)
    if len(zero):
        raise ValueError(f"zero diagonal entry in row {int(zero[0])}")
    rows = A.row_indices()
    on_diag = rows == A.col_indices
    vals = A.values.copy()
    vals[on_diag] = (1.0 + alpha) * vals[on_diag]
    return SparseMatrix(A.nrows, A.ncols, A.row_offsets, A.col_indices, vals)


def splitting(Ahat: SparseMatrix) -> tuple[np.ndarray, SparseMatrix]:
    """Jacobi splitting A_hat = D_hat (I - T); returns (1/diag, T)."""
    diag = Ahat.diagonal()
    zero = np.flatnonzero(diag == 0.0)
    if len(zero):
        raise ValueError(f"zero diagonal entry in row {int(zero[0])}")
    dinv = 1.0 / diag
    rows = Ahat.row_indices()
    off = rows != Ahat.col_indices
    T = SparseMatrix.from_coo(
        Ahat.nrows, Ahat.ncols, rows[off], Ahat.col_indices[off], -Ahat.values[off] * dinv[rows[off]]
    )
    return dinv, T


def chain_budget(epsilon: float, delta: float, T_inf_norm: float,
                 chain_count_cap: int = 1_000_000, walk_length_cap: int = 10_000) -> tuple[int, int, bool]:
    """Return (chains per row, maximum walk length, degenerate flag)."""
    n_chains = min(chain_count_cap, math.ceil((_PROBABLE_ERROR / epsilon) ** 2 - 1e-12))
    n_chains = max(n_chains, 1)
    if T_inf_norm >= 1.0:
        return n_chains, walk_length_cap, True
    if T_inf_norm == 0.0 or delta >= 1.0:
        return n_chains, 0, False
    steps = math.log(delta) / math.log(T_inf_norm)
    # guard against 4.000000000000001-style rounding
    return n_chains, min(walk_length_cap, max(math.ceil(steps - 1e-9), 0)), False


def row_fill_budget(A: SparseMatrix, fill_factor_multiplier: float | None) -> int:
    """Entries kept per row of P: floor(multiplier * phi(A) * n)."""
    n = A.nrows
    if fill_factor_multiplier is None:
        return n
    return max(1, min(n, int(math.floor(fill_factor_multiplier * A.nnz / n + 1e-12))))


@njit(cache=True)
def _walk_row(i, t_off, t_cols, t_sign, row_abs, cdf, n_chains, max_len, thresh, seed, acc, seen, touched):
    """Accumulate the walk estimates of row i of (I - T)^-1 into ``acc``."""
    ntouched = 0
    row = np.int64(i)
    for c in range(n_chains):
        state = row
        w = 1.0
        for m in range(max_len + 1):
            if not seen[state]:
                seen[state] = True
                touched[ntouched] = state
                ntouched += 1
            acc[state] += w
            if m == max_len:
                break
            start = t_off[state]
            end = t_off[state + 1]
            if start == end:
                break
            u = counter_uniform(seed, row, c, m)
            pos = end - 1
            for q in range(start, end - 1):
                if u < cdf[q]:
                    pos = q
                    break
            w = w * t_sign[pos] * row_abs[state]
            state = np.int64(t_cols[pos])
            if abs(w) < thresh:
                break
    return ntouched


@njit(cache=True, parallel=True)
def _walk_all_rows(n, t_off, t_cols, t_sign, row_abs, cdf, dinv, n_chains, max_len, thresh, seed, keep,
                   out_cols, out_vals, out_count):
    for i in prange(n):
        acc = np.zeros(n)
        seen = np.zeros(n, dtype=np.bool_)
        touched = np.empty(n, dtype=np.int64)
        nt = _walk_row(i, t_off, t_cols, t_sign, row_abs, cdf, n_chains, max_len, thresh, seed, acc, seen, touched)
        cols = np.sort(touched[:nt])
        vals = np.empty(nt)
        for q in range(nt):
            vals[q] = (acc[cols[q]] / n_chains) * dinv[cols[q]]
        if nt > keep:
            # stable sort on -|v| breaks ties by lower column index
            order = np.argsort(-np.abs(vals), kind="mergesort")
            chosen = np.zeros(nt, dtype=np.bool_)
            for q in range(keep):
                chosen[order[q]] = True
            for q in range(nt):
                if cols[q] == i:
                    chosen[q] = True
            cnt = 0
            for q in range(nt):
                if chosen[q]:
                    out_cols[i, cnt] = cols[q]
                    out_vals[i, cnt] = vals[q]
                    cnt += 1
            out_count[i] = cnt
        else:
            for q in range(nt):
                out_cols[i, q] = cols[q]
                out_vals[i, q] = vals[q]
            out_count[i] = nt


def build_preconditioner(A: SparseMatrix, params: McmcParams, fixed: McmcFixedSettings | None = None,
                         threads: int | None = None) -> PreconditionerBuildReport:
    """Estimate P ~ A_hat^-1 by random walks; deterministic in ``fixed.seed``."""
    fixed = fixed or McmcFixedSettings()
    if A.nrows != A.ncols:
        raise ValueError(f"A must be square, got {A.shape}")
    t0 = time.perf_counter()
    n = A.nrows
    Ahat = perturb(A, params.alpha)
    dinv, T = splitting(Ahat)
    abs_t = np.abs(T.values)
    row_abs = np.bincount(T.row_indices(), weights=abs_t, minlength=n)
    t_norm = float(row_abs.max()) if n else 0.0
    n_chains, max_len, degenerate = chain_budget(
        params.epsilon, params.delta, t_norm, fixed.chain_count_cap, fixed.walk_length_cap
    )

    # per-row cumulative transition probabilities |t_ij| / sum_k |t_ik|
    cdf = np.empty_like(abs_t)
    for i in range(n):
        a, b = T.row_offsets[i], T.row_offsets[i + 1]
        if b > a:
            cdf[a:b] = np.cumsum(abs_t[a:b]) / row_abs[i]
            cdf[b - 1] = 1.0
    t_sign = np.sign(T.values)

    keep = row_fill_budget(A, fixed.fill_factor_multiplier)
    width = min(n, keep + 1)
    out_cols = np.zeros((n, width), dtype=np.int64)
    out_vals = np.zeros((n, width))
    out_count = np.zeros(n, dtype=np.int64)

    prev = numba.get_num_threads()
    if threads is not None:
        numba.set_num_threads(max(1, min(threads, numba.config.NUMBA_NUM_THREADS)))
    try:
        _walk_all_rows(n, T.row_offsets, T.col_indices, t_sign, row_abs, cdf, dinv, n_chains, max_len,
                       fixed.truncation_threshold, np.uint64(fixed.seed & _SEED_MASK), keep,
                       out_cols, out_vals, out_count)
    finally:
        numba.set_num_threads(prev)

    mask = np.arange(width)[None, :] < out_count[:, None]
    rows = np.repeat(np.arange(n), out_count)
    P = SparseMatrix.from_coo(n, n, rows, out_cols[mask], out_vals[mask])
    return PreconditionerBuildReport(
        P=P,
        chains_per_row=n_chains,
        max_walk_len=max_len,
        spectral_bound=t_norm,
        build_wall_time=time.perf_counter() - t0,
        degenerate=degenerate,
    )
