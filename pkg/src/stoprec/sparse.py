"""Compressed-row sparse matrices and the kernels built on them.

``SparseMatrix`` is immutable once constructed.  Construction canonicalises
the storage: column indices sorted within each row, duplicates summed and
explicit zeros dropped, so the stored pattern is exactly the nonzero pattern
of the matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sps

__all__ = [
    "MatrixMarketError",
    "SparseMatrix",
    "norms",
    "read_matrix_market",
    "spmv",
    "transpose",
    "write_matrix_market",
]


class MatrixMarketError(ValueError):
    """Raised when a Matrix Market file cannot be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    nrows: int
    ncols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    _csr: sps.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        offsets = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        cols = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if offsets.shape != (self.nrows + 1,):
            raise ValueError("row_offsets must have length nrows + 1")
        if offsets[0] != 0 or offsets[-1] != len(vals) or len(cols) != len(vals):
            raise ValueError("row_offsets inconsistent with stored values")
        if np.any(np.diff(offsets) < 0):
            raise ValueError("row_offsets must be non-decreasing")
        if len(cols) and (cols.min() < 0 or cols.max() >= self.ncols):
            raise ValueError("column index out of range")
        for arr in (offsets, cols, vals):
            arr.setflags(write=False)
        object.__setattr__(self, "row_offsets", offsets)
        object.__setattr__(self, "col_indices", cols)
        object.__setattr__(self, "values", vals)
        object.__setattr__(
            self,
            "_csr",
            sps.csr_matrix((vals, cols, offsets), shape=(self.nrows, self.ncols)),
        )
        if not self._is_canonical():
            raise ValueError("storage is not canonical; use SparseMatrix.from_coo")

    def _is_canonical(self) -> bool:
        if np.any(self.values == 0.0):
            return False
        # strictly increasing columns within each row
        d = np.diff(self.col_indices)
        row_start = np.zeros(len(self.col_indices), dtype=bool)
        row_start[self.row_offsets[:-1][np.diff(self.row_offsets) > 0]] = True
        return bool(np.all((d > 0) | row_start[1:]))

    # -- constructors -------------------------------------------------------

    @classmethod
    def from_coo(cls, nrows, ncols, rows, cols, vals) -> "SparseMatrix":
        """Build from triplets; duplicates are summed, zeros dropped."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if len(rows) and (rows.min() < 0 or rows.max() >= nrows):
            raise ValueError("row index out of range")
        if len(cols) and (cols.min() < 0 or cols.max() >= ncols):
            raise ValueError("column index out of range")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(rows):
            key = rows * ncols + cols
            first = np.concatenate(([True], key[1:] != key[:-1]))
            starts = np.flatnonzero(first)
            # sequential sums keep duplicate accumulation order fixed
            vals = np.add.reduceat(vals, starts)
            rows, cols = rows[starts], cols[starts]
            keep = vals != 0.0
            rows, cols, vals = rows[keep], cols[keep], vals[keep]
        offsets = np.zeros(nrows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=nrows), out=offsets[1:])
        return cls(nrows, ncols, offsets, cols, vals)

    @classmethod
    def from_dense(cls, a) -> "SparseMatrix":
        a = np.asarray(a, dtype=np.float64)
        r, c = np.nonzero(a)
        return cls.from_coo(a.shape[0], a.shape[1], r, c, a[r, c])

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrix":
        m = sps.coo_matrix(m)
        return cls.from_coo(m.shape[0], m.shape[1], m.row, m.col, m.data)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        idx = np.arange(n)
        return cls.from_coo(n, n, idx, idx, np.ones(n))

    # -- accessors ----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    def row_indices(self) -> np.ndarray:
        """Row index of every stored entry (COO row array)."""
        return np.repeat(np.arange(self.nrows), np.diff(self.row_offsets))

    def diagonal(self) -> np.ndarray:
        return self._csr.diagonal()

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def to_scipy(self) -> sps.csr_matrix:
        return self._csr.copy()

    def __matmul__(self, x):
        return spmv(self, x)

    def equals(self, other: "SparseMatrix") -> bool:
        """Exact structural and bitwise value equality."""
        return (
            self.shape == other.shape
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
            and np.array_equal(self.values, other.values)
        )


def spmv(A: SparseMatrix, x) -> np.ndarray:
    """y = A x, rows summed in ascending column order."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) != A.ncols:
        raise ValueError(f"dimension mismatch: A is {A.shape}, x has shape {x.shape}")
    # scipy's csr matvec walks each row in storage order, which is canonical here
    return A._csr @ x


def transpose(A: SparseMatrix) -> SparseMatrix:
    return SparseMatrix.from_coo(A.ncols, A.nrows, A.col_indices, A.row_indices(), A.values)


def norms(A: SparseMatrix) -> tuple[float, float, float]:
    """Return (1-norm, inf-norm, Frobenius norm)."""
    absval = np.abs(A.values)
    col_sums = np.bincount(A.col_indices, weights=absval, minlength=A.ncols)
    row_sums = np.bincount(A.row_indices(), weights=absval, minlength=A.nrows)
    one = float(col_sums.max()) if A.ncols else 0.0
    inf = float(row_sums.max()) if len(row_sums) else 0.0
    return one, inf, float(np.sqrt(np.sum(A.values**2)))


# -- Matrix Market ------------------------------------------------------------

def read_matrix_market(path) -> SparseMatrix:
    """Read a coordinate, real (or integer), general or symmetric file."""
    text = Path(path).read_text().splitlines()
    if not text:
        raise MatrixMarketError("empty file", 1)
    header = text[0].split()
    if len(header) != 5 or header[0].lower() != "%%matrixmarket":
        raise MatrixMarketError("missing %%MatrixMarket banner", 1)
    obj, fmt, field_, symm = (h.lower() for h in header[1:])
    if obj != "matrix" or fmt != "coordinate":
        raise MatrixMarketError(f"unsupported object/format '{obj} {fmt}'", 1)
    if field_ not in ("real", "integer", "double"):
        raise MatrixMarketError(f"unsupported field '{field_}' (need real)", 1)
    if symm not in ("general", "symmetric"):
        raise MatrixMarketError(f"unsupported symmetry '{symm}'", 1)

    lineno = 1
    size = None
    rows, cols, vals = [], [], []
    nentries = 0
    for lineno, line in enumerate(text[1:], start=2):
        s = line.strip()
        if not s or s.startswith("%"):
            continue
        parts = s.split()
        if size is None:
            if len(parts) != 3:
                raise MatrixMarketError("size line must be 'nrows ncols nnz'", lineno)
            try:
                size = tuple(int(p) for p in parts)
            except ValueError:
                raise MatrixMarketError(f"bad size line '{s}'", lineno) from None
            continue
        if len(parts) != 3:
            raise MatrixMarketError(f"expected 'i j value', got '{s}'", lineno)
        try:
            i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise MatrixMarketError(f"cannot parse entry '{s}'", lineno) from None
        if not (1 <= i <= size[0] and 1 <= j <= size[1]):
            raise MatrixMarketError(f"index ({i}, {j}) out of bounds for {size[0]}x{size[1]}", lineno)
        nentries += 1
        rows.append(i - 1)
        cols.append(j - 1)
        vals.append(v)
        if symm == "symmetric" and i != j:
            rows.append(j - 1)
            cols.append(i - 1)
            vals.append(v)
    if size is None:
        raise MatrixMarketError("missing size line", lineno)
    if nentries != size[2]:
        raise MatrixMarketError(f"expected {size[2]} entries, found {nentries}", lineno)
    return SparseMatrix.from_coo(size[0], size[1], rows, cols, vals)


def write_matrix_market(A: SparseMatrix, path, comment: str | None = None) -> None:
    lines = ["%%MatrixMarket matrix coordinate real general"]
    if comment:
        lines.extend(f"% {c}" for c in comment.splitlines())
    lines.append(f"{A.nrows} {A.ncols} {A.nnz}")
    rows = A.row_indices()
    # repr() round-trips doubles exactly
    lines.extend(f"{r + 1} {c + 1} {v!r}" for r, c, v in zip(rows.tolist(), A.col_indices.tolist(), A.values.tolist()))
    Path(path).write_text("\n".join(lines) + "\n")
