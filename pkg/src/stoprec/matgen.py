"""Deterministic test-matrix generators.

Grid families live on the (g-1) x (g-1) interior of the unit square with
Dirichlet boundary and are scaled by h^2 (h = 1/g), so the Laplacian stencil
is the familiar (-1, -1, 4, -1, -1).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .krylov import Solver, SolverConfig, solve
from .sparse import SparseMatrix, spmv, transpose

__all__ = [
    "Family",
    "GeneratorSpec",
    "estimate_condition",
    "gen_advdiff2d",
    "gen_laplacian2d",
    "gen_random_diag_dominant",
    "generate",
]


class Family(str, enum.Enum):
    LAPLACIAN2D = "laplacian2d"
    ADVDIFF2D = "advdiff2d"
    RANDOM_DIAG_DOMINANT = "random_diag_dominant"


@dataclass(frozen=True)
class GeneratorSpec:
    family: Family
    grid_param: int
    peclet: float = 0.0
    seed: int = 0
    density: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))

    @property
    def dimension(self) -> int:
        if self.family is Family.RANDOM_DIAG_DOMINANT:
            return self.grid_param
        return (self.grid_param - 1) ** 2

    @property
    def name(self) -> str:
        if self.family is Family.LAPLACIAN2D:
            return f"laplacian2d_g{self.grid_param}"
        if self.family is Family.ADVDIFF2D:
            return f"advdiff2d_g{self.grid_param}_pe{self.peclet:g}"
        return f"randdd_n{self.grid_param}_d{self.density:g}_s{self.seed}"


def generate(spec: GeneratorSpec) -> SparseMatrix:
    if spec.family is Family.LAPLACIAN2D:
        return gen_laplacian2d(spec.grid_param)
    if spec.family is Family.ADVDIFF2D:
        return gen_advdiff2d(spec.grid_param, spec.peclet)
    return gen_random_diag_dominant(spec.grid_param, spec.density, spec.seed)


def _grid_operator(g: int, west: float, east: float, south: float, north: float, diag: float) -> SparseMatrix:
    if g < 4:
        raise ValueError(f"grid parameter must be >= 4, got {g}")
    m = g - 1
    ix, iy = np.meshgrid(np.arange(m), np.arange(m), indexing="xy")
    ix, iy = ix.ravel(), iy.ravel()
    k = iy * m + ix
    rows, cols, vals = [k], [k], [np.full(len(k), diag)]
    for dx, dy, w in ((-1, 0, west), (1, 0, east), (0, -1, south), (0, 1, north)):
        jx, jy = ix + dx, iy + dy
        ok = (jx >= 0) & (jx < m) & (jy >= 0) & (jy < m)
        rows.append(k[ok])
        cols.append((jy * m + jx)[ok])
        vals.append(np.full(int(ok.sum()), w))
    n = m * m
    return SparseMatrix.from_coo(n, n, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))


def gen_laplacian2d(g: int) -> SparseMatrix:
    """5-point Laplacian on a (g-1)^2 interior grid."""
    return _grid_operator(g, -1.0, -1.0, -1.0, -1.0, 4.0)


def gen_advdiff2d(g: int, peclet: float, tau: float | None = None) -> SparseMatrix:
    """Diffusion plus first-order upwind advection with velocity (peclet, peclet/2).

    ``tau`` adds the mass-matrix shift of one implicit Euler step of length
    ``tau``; the default (steady operator) makes ``peclet=0`` coincide exactly
    with :func:`gen_laplacian2d`.
    """
    if peclet < 0:
        raise ValueError("peclet must be >= 0")
    h = 1.0 / g
    cx, cy = h * peclet, h * peclet / 2.0
    diag = 4.0 + (cx + cy)
    if tau is not None:
        if tau <= 0:
            raise ValueError("tau must be > 0")
        diag += h * h / tau
    return _grid_operator(g, -1.0 - cx, -1.0, -1.0 - cy, -1.0, diag)


def gen_random_diag_dominant(n: int, density: float, seed: int) -> SparseMatrix:
    """Random strictly diagonally dominant matrix with ||I - D^-1 A||_inf < 0.5."""
    if n < 2:
        raise ValueError("n must be >= 2")
    if not 0.0 < density <= 1.0:
        raise ValueError("density must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    mask = rng.random((n, n)) < density
    off = rng.uniform(-1.0, 1.0, size=(n, n))
    np.fill_diagonal(mask, False)
    dense = np.where(mask, off, 0.0)
    np.fill_diagonal(dense, 2.0 * np.abs(dense).sum(axis=1) + 1.0)
    return SparseMatrix.from_dense(dense)


def _is_symmetric(A: SparseMatrix) -> bool:
    return transpose(A).equals(A)


def estimate_condition(A: SparseMatrix, iters: int = 100, seed: int = 0, inner_tol: float = 1e-10) -> float:
    """2-norm condition estimate by power iteration on A and on its inverse.

    Symmetric matrices iterate on A directly (CG inner solves when A is
    positive definite); general matrices iterate on A^T A via GMRES solves
    with A and A^T.
    """
    n = A.nrows
    v0 = np.random.default_rng(seed).standard_normal(n)
    symmetric = _is_symmetric(A)
    At = A if symmetric else transpose(A)
    inner = SolverConfig(Solver.CG if symmetric else Solver.GMRES, rel_tol=inner_tol, max_iters=20 * n)

    def forward(v):
        return spmv(A, v) if symmetric else spmv(At, spmv(A, v))

    def inverse(v):
        if symmetric:
            res = solve(A, v, cfg=inner)
            if res.status == "breakdown":  # indefinite: fall back to GMRES
                res = solve(A, v, cfg=SolverConfig(Solver.GMRES, rel_tol=inner_tol, max_iters=20 * n))
            return res.x
        z = solve(At, v, cfg=inner).x
        return solve(A, z, cfg=inner).x

    def dominant(op):
        v = v0 / np.linalg.norm(v0)
        lam = 0.0
        for _ in range(iters):
            w = op(v)
            lam = float(np.dot(v, w))
            v = w / np.linalg.norm(w)
        return abs(lam)

    big = dominant(forward)
    small_inv = dominant(inverse)
    kappa = big * small_inv
    return kappa if symmetric else float(np.sqrt(kappa))
