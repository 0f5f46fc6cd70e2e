"""Surrogate inputs: matrix graph, cheap matrix features, parameter encoding."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sps

from .krylov import Solver
from .mcmc import McmcParams
from .sparse import SparseMatrix, norms, transpose

__all__ = [
    "FEATURE_NAMES",
    "PARAM_NAMES",
    "MatrixContext",
    "MatrixFeatures",
    "MatrixGraph",
    "Standardizer",
    "build_graph",
    "decode_params",
    "encode_params",
    "fit_standardizer",
    "matrix_features",
]

FEATURE_NAMES = (
    "one_norm",
    "inf_norm",
    "frob_norm",
    "sparsity",
    "symmetric_flag",
    "asymmetry_ratio",
    "dimension_log",
)
SOLVER_ORDER = (Solver.GMRES, Solver.BICGSTAB, Solver.CG)
PARAM_NAMES = ("alpha", "log_epsilon", "log_delta") + tuple(f"solver_{s.value}" for s in SOLVER_ORDER)


@dataclass(frozen=True, eq=False)
class MatrixGraph:
    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    node_feature: np.ndarray

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        return list(zip(self.src.tolist(), self.dst.tolist(), self.weight.tolist()))


@dataclass(frozen=True)
class MatrixFeatures:
    one_norm: float
    inf_norm: float
    frob_norm: float
    sparsity: float
    symmetric_flag: int
    asymmetry_ratio: float
    dimension_log: float

    def as_vector(self) -> np.ndarray:
        return np.array([float(getattr(self, k)) for k in FEATURE_NAMES])

    def to_dict(self) -> dict:
        return asdict(self)


def build_graph(A: SparseMatrix) -> MatrixGraph:
    """Directed graph with an edge i -> j for every stored A_ij (row-major)."""
    return MatrixGraph(
        num_nodes=A.nrows,
        src=A.row_indices(),
        dst=A.col_indices.copy(),
        weight=A.values.copy(),
        node_feature=np.diff(A.row_offsets).astype(np.float64),
    )


def matrix_features(A: SparseMatrix) -> MatrixFeatures:
    n = A.nrows
    one, inf, frob = norms(A)
    At = transpose(A)
    if At.equals(A):
        symmetric, asym = 1, 0.0
    else:
        diff = SparseMatrix.from_coo(
            n, n,
            np.concatenate([A.row_indices(), At.row_indices()]),
            np.concatenate([A.col_indices, At.col_indices]),
            np.concatenate([A.values, -At.values]),
        )
        asym = norms(diff)[2] / (2.0 * frob) if frob > 0 else 0.0
        # an exactly cancelling difference means symmetric up to storage
        symmetric = 1 if asym == 0.0 else 0
    return MatrixFeatures(
        one_norm=one,
        inf_norm=inf,
        frob_norm=frob,
        sparsity=A.nnz / float(n * n),
        symmetric_flag=symmetric,
        asymmetry_ratio=asym,
        dimension_log=math.log(n),
    )


@dataclass
class Standardizer:
    means: np.ndarray
    stds: np.ndarray

    def apply(self, v) -> np.ndarray:
        return (np.asarray(v, dtype=np.float64) - self.means) / self.stds

    def invert(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.stds + self.means

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "stds": self.stds.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.asarray(d["means"], dtype=np.float64), np.asarray(d["stds"], dtype=np.float64))


def fit_standardizer(samples) -> Standardizer:
    """Population mean/std per channel; zero-variance channels get std 1."""
    X = np.asarray(samples, dtype=np.float64)
    if X.size == 0:
        raise ValueError("cannot fit a standardizer on an empty sample set")
    if X.ndim == 1:
        X = X[:, None]
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    stds = np.where(stds > 0.0, stds, 1.0)
    return Standardizer(means, stds)


def encode_params(p: McmcParams) -> np.ndarray:
    """(alpha, ln eps, ln delta, one-hot solver)."""
    onehot = [1.0 if p.solver is s else 0.0 for s in SOLVER_ORDER]
    return np.array([p.alpha, math.log(p.epsilon), math.log(p.delta), *onehot])


def decode_params(v) -> McmcParams:
    v = np.asarray(v, dtype=np.float64)
    solver = SOLVER_ORDER[int(np.argmax(v[3:6]))]
    # clamp so exp(0 + rounding) cannot leave (0, 1]
    eps = min(1.0, math.exp(v[1]))
    delta = min(1.0, math.exp(v[2]))
    return McmcParams(float(v[0]), eps, delta, solver)


@dataclass(eq=False)
class MatrixContext:
    """Everything the surrogate needs to know about one matrix.

    ``mean_op`` averages a node quantity over each node's out-neighbours;
    ``edge_weight_mean`` is that average of the edge weights after dividing
    them by frob_norm / sqrt(nnz).
    """

    matrix_id: str
    graph: MatrixGraph
    features: MatrixFeatures
    mean_op: sps.csr_matrix
    has_neighbors: np.ndarray
    edge_weight_mean: np.ndarray

    @classmethod
    def from_matrix(cls, matrix_id: str, A: SparseMatrix) -> "MatrixContext":
        graph = build_graph(A)
        feats = matrix_features(A)
        n = graph.num_nodes
        deg = graph.node_feature
        has = deg > 0
        inv = np.where(has, 1.0 / np.where(has, deg, 1.0), 0.0)
        mean_op = sps.csr_matrix((inv[graph.src], (graph.src, graph.dst)), shape=(n, n))
        scale = feats.frob_norm / math.sqrt(max(A.nnz, 1))
        w = graph.weight / scale if scale > 0 else graph.weight
        wbar = np.bincount(graph.src, weights=w, minlength=n) * inv
        return cls(matrix_id, graph, feats, mean_op, has, wbar)

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes
