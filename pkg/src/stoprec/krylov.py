"""Krylov solvers (GMRES, BiCGStab, CG) with left preconditioning.

All solvers start from x0 = 0 and test convergence on the *unpreconditioned*
relative residual ||b - A x|| / ||b||, so iteration counts obtained with
different preconditioners correspond to the same accuracy.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .sparse import SparseMatrix, spmv

__all__ = [
    "Solver",
    "SolverConfig",
    "SolveResult",
    "performance_metric",
    "solve",
]


class Solver(str, enum.Enum):
    GMRES = "gmres"
    BICGSTAB = "bicgstab"
    CG = "cg"

    @classmethod
    def parse(cls, value) -> "Solver":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown solver {value!r}; expected one of {[s.value for s in cls]}") from None


@dataclass(frozen=True)
class SolverConfig:
    solver: Solver = Solver.GMRES
    rel_tol: float = 1e-8
    max_iters: int | None = None  # None -> 10 * n
    gmres_restart: int = 50

    def __post_init__(self):
        object.__setattr__(self, "solver", Solver.parse(self.solver))
        if not 0.0 < self.rel_tol < 1.0:
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.gmres_restart < 1:
            raise ValueError("gmres_restart must be >= 1")

    def iteration_cap(self, n: int) -> int:
        return self.max_iters if self.max_iters is not None else 10 * n


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    converged: bool
    final_rel_residual: float
    status: str = "converged"  # converged | max_iters | breakdown | divergence
    history: list[float] = field(default_factory=list, repr=False)

    def to_dict(self, include_x: bool = False) -> dict:
        d = {
            "iterations": self.iterations,
            "converged": self.converged,
            "final_rel_residual": self.final_rel_residual,
            "status": self.status,
        }
        if include_x:
            d["x"] = self.x.tolist()
        return d


def performance_metric(steps_pre: int, steps_nopre: int) -> float:
    """Ratio of preconditioned to unpreconditioned iteration counts."""
    if steps_nopre <= 0:
        raise ValueError("steps_nopre must be >= 1")
    return float(steps_pre) / float(steps_nopre)


def solve(A: SparseMatrix, b, P: SparseMatrix | None = None, cfg: SolverConfig | None = None) -> SolveResult:
    """Solve A x = b (or P A x = P b when ``P`` is given)."""
    cfg = cfg or SolverConfig()
    n = A.nrows
    if A.ncols != n:
        raise ValueError(f"A must be square, got {A.shape}")
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (n,):
        raise ValueError(f"b has shape {b.shape}, expected ({n},)")
    if P is not None and P.shape != (n, n):
        raise ValueError(f"P has shape {P.shape}, expected {(n, n)}")

    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return SolveResult(np.zeros(n), 0, True, 0.0)

    matvec = lambda v: spmv(A, v)  # noqa: E731
    if P is None:
        precond = lambda v: v  # noqa: E731
    else:
        precond = lambda v: spmv(P, v)  # noqa: E731

    maxit = cfg.iteration_cap(n)
    if cfg.solver is Solver.GMRES:
        return _gmres(matvec, precond, b, bnorm, cfg.rel_tol, maxit, min(cfg.gmres_restart, n))
    if cfg.solver is Solver.BICGSTAB:
        return _bicgstab(matvec, precond, b, bnorm, cfg.rel_tol, maxit)
    return _cg(matvec, precond, b, bnorm, cfg.rel_tol, maxit)


def _true_residual(matvec, b, x, bnorm) -> float:
    return float(np.linalg.norm(b - matvec(x))) / bnorm


def _finite(*arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


def _gmres(matvec, precond, b, bnorm, tol, maxit, m) -> SolveResult:
    n = len(b)
    x = np.zeros(n)
    it = 0
    rel = 1.0
    history = []
    while it < maxit:
        r = precond(b - matvec(x))
        beta = float(np.linalg.norm(r))
        if not math.isfinite(beta):
            return SolveResult(x, it, False, rel, "divergence", history)
        if beta == 0.0:
            # P annihilates the residual; nothing more GMRES can do
            return SolveResult(x, it, False, rel, "breakdown", history)
        V = np.zeros((m + 1, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        xk = x
        for j in range(m):
            w = precond(matvec(V[j]))
            # modified Gram-Schmidt, then one re-orthogonalisation sweep
            for _ in range(2):
                for i in range(j + 1):
                    hij = float(np.dot(w, V[i]))
                    H[i, j] += hij
                    w -= hij * V[i]
            hnext = float(np.linalg.norm(w))
            H[j + 1, j] = hnext
            for i in range(j):
                tmp = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = tmp
            denom = math.hypot(H[j, j], H[j + 1, j])
            if denom == 0.0 or not math.isfinite(denom):
                status = "divergence" if not math.isfinite(denom) else "breakdown"
                return SolveResult(xk, it, False, rel, status, history)
            cs[j] = H[j, j] / denom
            sn[j] = H[j + 1, j] / denom
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            it += 1
            history.append(abs(g[j + 1]))

            y = solve_triangular(H[: j + 1, : j + 1], g[: j + 1])
            xk = x + V[: j + 1].T @ y
            if not _finite(xk):
                return SolveResult(xk, it, False, rel, "divergence", history)
            rel = _true_residual(matvec, b, xk, bnorm)
            if rel <= tol:
                return SolveResult(xk, it, True, rel, "converged", history)
            if it >= maxit:
                break
            if hnext <= 1e-14 * beta:
                break
            V[j + 1] = w / hnext
        # an invariant subspace with a large true residual also lands here;
        # restarting from xk is the only option left
        x = xk
    return SolveResult(x, it, False, rel, "max_iters", history)


def _bicgstab(matvec, precond, b, bnorm, tol, maxit) -> SolveResult:
    n = len(b)
    op = lambda v: precond(matvec(v))  # noqa: E731
    x = np.zeros(n)
    r = precond(b)
    r0hat = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros(n)
    p = np.zeros(n)
    rel = 1.0
    history = []
    r0norm = float(np.linalg.norm(r0hat))
    for it in range(1, maxit + 1):
        rho_new = float(np.dot(r0hat, r))
        if not math.isfinite(rho_new):
            return SolveResult(x, it - 1, False, rel, "divergence", history)
        if abs(rho_new) <= 1e-30 * r0norm * max(float(np.linalg.norm(r)), 1e-300):
            return SolveResult(x, it - 1, False, rel, "breakdown", history)
        beta = (rho_new / rho) * (alpha / omega)
        rho = rho_new
        p = r + beta * (p - omega * v)
        v = op(p)
        denom = float(np.dot(r0hat, v))
        if denom == 0.0 or not math.isfinite(denom):
            return SolveResult(x, it - 1, False, rel, "breakdown" if denom == 0.0 else "divergence", history)
        alpha = rho / denom
        s = r - alpha * v
        x_half = x + alpha * p
        if not _finite(x_half):
            return SolveResult(x_half, it, False, rel, "divergence", history)
        rel = _true_residual(matvec, b, x_half, bnorm)
        if rel <= tol:
            history.append(rel)
            return SolveResult(x_half, it, True, rel, "converged", history)
        t = op(s)
        tt = float(np.dot(t, t))
        if tt == 0.0:
            return SolveResult(x_half, it, False, rel, "breakdown", history)
        omega = float(np.dot(t, s)) / tt
        x = x_half + omega * s
        r = s - omega * t
        if not _finite(x):
            return SolveResult(x, it, False, rel, "divergence", history)
        rel = _true_residual(matvec, b, x, bnorm)
        history.append(rel)
        if rel <= tol:
            return SolveResult(x, it, True, rel, "converged", history)
        if omega == 0.0:
            return SolveResult(x, it, False, rel, "breakdown", history)
    return SolveResult(x, maxit, False, rel, "max_iters", history)


def _cg(matvec, precond, b, bnorm, tol, maxit) -> SolveResult:
    n = len(b)
    x = np.zeros(n)
    r = b.copy()
    z = precond(r)
    p = z.copy()
    rz = float(np.dot(r, z))
    rel = 1.0
    history = []
    for it in range(1, maxit + 1):
        Ap = matvec(p)
        pAp = float(np.dot(p, Ap))
        if not math.isfinite(pAp):
            return SolveResult(x, it - 1, False, rel, "divergence", history)
        if pAp <= 0.0:
            return SolveResult(x, it - 1, False, rel, "breakdown", history)
        alpha = rz / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        if not _finite(x):
            return SolveResult(x, it, False, rel, "divergence", history)
        rel = _true_residual(matvec, b, x, bnorm)
        history.append(rel)
        if rel <= tol:
            return SolveResult(x, it, True, rel, "converged", history)
        z = precond(r)
        rz_new = float(np.dot(r, z))
        if rz == 0.0:
            return SolveResult(x, it, False, rel, "breakdown", history)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return SolveResult(x, maxit, False, rel, "max_iters", history)
