"""Deterministic sparse matrix kernels.

CSR is the working format for assembly and solves, COO is the exchange
format.  Everything here is written so that a given input produces
bit-identical output on every run: duplicate summation, matrix-vector
products and the Cuthill-McKee traversal all have a fixed, documented
order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CooMatrix",
    "CsrMatrix",
    "Permutation",
    "bandwidth",
    "coo_to_csr",
    "csr_to_coo",
    "is_structurally_symmetric",
    "load_matrix_market",
    "pattern_fingerprint",
    "permute_symmetric",
    "rcm_ordering",
    "save_matrix_market",
    "spmv",
]


@dataclass
class CooMatrix:
    """Coordinate-format matrix: parallel (row, col, value) triplets.

    Duplicate coordinates are allowed; they are summed on conversion to
    CSR.  Triplet order is significant (it fixes the summation order),
    so the constructor never reorders entries.
    """

    nrows: int
    ncols: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.int64)
        self.cols = np.ascontiguousarray(self.cols, dtype=np.int64)
        self.vals = np.ascontiguousarray(self.vals, dtype=np.float64)
        if self.nrows < 0 or self.ncols < 0:
            raise ValueError("matrix dimensions must be nonnegative")
        if not (self.rows.shape == self.cols.shape == self.vals.shape):
            raise ValueError("rows, cols and vals must have equal length")
        if self.rows.ndim != 1:
            raise ValueError("triplet arrays must be one-dimensional")
        if self.rows.size:
            if self.rows.min() < 0 or self.rows.max() >= self.nrows:
                raise ValueError("row index out of range")
            if self.cols.min() < 0 or self.cols.max() >= self.ncols:
                raise ValueError("column index out of range")

    @property
    def nnz(self) -> int:
        return self.rows.size


@dataclass
class CsrMatrix:
    """Compressed sparse row matrix.

    Invariants, checked on construction: ``row_ptr`` has length
    ``nrows + 1``, starts at 0, ends at ``nnz`` and is nondecreasing;
    within each row the column indices are strictly increasing (no
    duplicate coordinates).  Stored values may be zero; the stored
    pattern is what fingerprinting and reordering operate on.
    """

    nrows: int
    ncols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        self.row_ptr = np.ascontiguousarray(self.row_ptr, dtype=np.int64)
        self.col_idx = np.ascontiguousarray(self.col_idx, dtype=np.int64)
        self.vals = np.ascontiguousarray(self.vals, dtype=np.float64)
        if self.row_ptr.shape != (self.nrows + 1,):
            raise ValueError("row_ptr must have length nrows + 1")
        if self.row_ptr[0] != 0 or self.row_ptr[-1] != self.col_idx.size:
            raise ValueError("row_ptr must start at 0 and end at nnz")
        if np.any(np.diff(self.row_ptr) < 0):
            raise ValueError("row_ptr must be nondecreasing")
        if self.col_idx.shape != self.vals.shape:
            raise ValueError("col_idx and vals must have equal length")
        if self.col_idx.size:
            if self.col_idx.min() < 0 or self.col_idx.max() >= self.ncols:
                raise ValueError("column index out of range")
        if self.col_idx.size > 1:
            # strictly increasing within each row; the only nonpositive
            # jumps of the full diff may sit at row boundaries
            jumps = np.diff(self.col_idx) <= 0
            boundary = np.zeros(self.col_idx.size - 1, dtype=bool)
            ends = self.row_ptr[1:-1]
            ends = ends[(ends > 0) & (ends < self.col_idx.size)]
            boundary[ends - 1] = True
            if np.any(jumps & ~boundary):
                raise ValueError("column indices must be strictly increasing within a row")

    @property
    def nnz(self) -> int:
        return self.col_idx.size

    def entry_rows(self) -> np.ndarray:
        """Row index of every stored entry, in storage order."""
        return np.repeat(np.arange(self.nrows, dtype=np.int64), np.diff(self.row_ptr))

    def diagonal(self) -> np.ndarray:
        """Stored main-diagonal values (zero where the entry is absent)."""
        n = min(self.nrows, self.ncols)
        diag = np.zeros(n)
        rows = self.entry_rows()
        on_diag = (rows == self.col_idx) & (rows < n)
        diag[rows[on_diag]] = self.vals[on_diag]
        return diag

    def toarray(self) -> np.ndarray:
        dense = np.zeros((self.nrows, self.ncols))
        dense[self.entry_rows(), self.col_idx] = self.vals
        return dense


@dataclass
class Permutation:
    """Row/column reordering with ``perm[new] = old`` semantics."""

    perm: np.ndarray
    inverse: np.ndarray = field(init=False)

    def __post_init__(self):
        self.perm = np.ascontiguousarray(self.perm, dtype=np.int64)
        n = self.perm.size
        counts = np.zeros(n, dtype=np.int64)
        if self.perm.size and (self.perm.min() < 0 or self.perm.max() >= n):
            raise ValueError("permutation entries out of range")
        np.add.at(counts, self.perm, 1)
        if np.any(counts != 1):
            raise ValueError("permutation is not a bijection")
        inv = np.empty(n, dtype=np.int64)
        inv[self.perm] = np.arange(n, dtype=np.int64)
        self.inverse = inv

    def __len__(self) -> int:
        return self.perm.size

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n, dtype=np.int64))


def coo_to_csr(a: CooMatrix) -> CsrMatrix:
    """Compress triplets to CSR, summing duplicates.

    Duplicates are accumulated in ascending (row, col, input position)
    order: the triplets are stably sorted by (row, col) and each run of
    equal coordinates is summed first-to-last.  This makes the result a
    pure function of the triplet sequence, bit for bit.
    """
    if a.nnz == 0:
        return CsrMatrix(
            a.nrows,
            a.ncols,
            np.zeros(a.nrows + 1, dtype=np.int64),
            np.empty(0, dtype=np.int64),
            np.empty(0),
        )
    order = np.lexsort((a.cols, a.rows))  # stable: ties keep input order
    rows = a.rows[order]
    cols = a.cols[order]
    vals = a.vals[order]
    boundary = np.empty(rows.size, dtype=bool)
    boundary[0] = True
    boundary[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
    group = np.cumsum(boundary) - 1
    # bincount accumulates sequentially over its input, preserving the
    # sorted-stable order fixed above
    summed = np.bincount(group, weights=vals)
    starts = np.flatnonzero(boundary)
    out_rows = rows[starts]
    out_cols = cols[starts]
    row_counts = np.bincount(out_rows, minlength=a.nrows)
    row_ptr = np.zeros(a.nrows + 1, dtype=np.int64)
    np.cumsum(row_counts, out=row_ptr[1:])
    return CsrMatrix(a.nrows, a.ncols, row_ptr, out_cols, summed)


def csr_to_coo(a: CsrMatrix) -> CooMatrix:
    """Expand CSR back to triplets in storage (row-major) order."""
    return CooMatrix(a.nrows, a.ncols, a.entry_rows(), a.col_idx.copy(), a.vals.copy())


def spmv(a: CsrMatrix, x: np.ndarray) -> np.ndarray:
    """Matrix-vector product ``y = A x``.

    Each output entry is accumulated over the row's stored entries in
    ascending column order, so the result is bit-identical across runs
    and independent of how callers batch their work.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (a.ncols,):
        raise ValueError(f"operand has length {x.shape}, expected {a.ncols}")
    if a.nnz == 0:
        return np.zeros(a.nrows)
    products = a.vals * x[a.col_idx]
    y = np.bincount(a.entry_rows(), weights=products, minlength=a.nrows)
    return y


def _symmetrized_adjacency(a: CsrMatrix):
    """Pattern of A + A^T without the diagonal, as (ptr, idx) lists."""
    rows = a.entry_rows()
    sym_r = np.concatenate([rows, a.col_idx])
    sym_c = np.concatenate([a.col_idx, rows])
    off = sym_r != sym_c
    sym_r = sym_r[off]
    sym_c = sym_c[off]
    order = np.lexsort((sym_c, sym_r))
    sym_r = sym_r[order]
    sym_c = sym_c[order]
    if sym_r.size:
        keep = np.empty(sym_r.size, dtype=bool)
        keep[0] = True
        keep[1:] = (sym_r[1:] != sym_r[:-1]) | (sym_c[1:] != sym_c[:-1])
        sym_r = sym_r[keep]
        sym_c = sym_c[keep]
    counts = np.bincount(sym_r, minlength=a.nrows)
    ptr = np.zeros(a.nrows + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return ptr, sym_c


def rcm_ordering(a: CsrMatrix) -> Permutation:
    """Reverse Cuthill-McKee ordering of a square matrix.

    The pattern is symmetrized first.  Traversal is fully determined:
    each component starts from its minimum-degree node (smallest index
    on ties) and BFS neighbors are visited in ascending (degree, index)
    order.  The concatenated visit order is reversed to give the final
    permutation, ``perm[new] = old``.
    """
    if a.nrows != a.ncols:
        raise ValueError("rcm_ordering requires a square matrix")
    n = a.nrows
    ptr, adj = _symmetrized_adjacency(a)
    degree = np.diff(ptr)
    visited = np.zeros(n, dtype=bool)
    order = np.empty(n, dtype=np.int64)
    pos = 0
    # seeds sorted once by (degree, index); skip the ones BFS reaches
    seeds = np.lexsort((np.arange(n), degree))
    for seed in seeds:
        if visited[seed]:
            continue
        visited[seed] = True
        head = pos
        order[pos] = seed
        pos += 1
        while head < pos:
            u = order[head]
            head += 1
            nbrs = adj[ptr[u]:ptr[u + 1]]
            nbrs = nbrs[~visited[nbrs]]
            if nbrs.size:
                nbrs = nbrs[np.lexsort((nbrs, degree[nbrs]))]
                visited[nbrs] = True
                order[pos:pos + nbrs.size] = nbrs
                pos += nbrs.size
    return Permutation(order[::-1].copy())


def permute_symmetric(a: CsrMatrix, p: Permutation) -> CsrMatrix:
    """Apply a symmetric reordering: ``B[i, j] = A[p[i], p[j]]``.

    Values are carried over bit-exactly; only their positions change.
    """
    if a.nrows != a.ncols:
        raise ValueError("permute_symmetric requires a square matrix")
    if len(p) != a.nrows:
        raise ValueError(f"permutation has length {len(p)}, expected {a.nrows}")
    inv = p.inverse
    new_rows = inv[a.entry_rows()]
    new_cols = inv[a.col_idx]
    return coo_to_csr(CooMatrix(a.nrows, a.ncols, new_rows, new_cols, a.vals.copy()))


def bandwidth(a: CsrMatrix) -> int:
    """Maximum ``|i - j|`` over stored entries; 0 for an empty matrix."""
    if a.nnz == 0:
        return 0
    return int(np.max(np.abs(a.entry_rows() - a.col_idx)))


def is_structurally_symmetric(a: CsrMatrix) -> bool:
    """True when the stored pattern equals its transpose's pattern."""
    if a.nrows != a.ncols:
        return False
    rows = a.entry_rows()
    fwd = np.lexsort((a.col_idx, rows))
    rev = np.lexsort((rows, a.col_idx))
    return bool(
        np.array_equal(rows[fwd], a.col_idx[rev])
        and np.array_equal(a.col_idx[fwd], rows[rev])
    )


def pattern_fingerprint(a: CsrMatrix) -> str:
    """Stable hash of the stored pattern (shape + row_ptr + col_idx)."""
    h = hashlib.sha256()
    h.update(np.int64(a.nrows).tobytes())
    h.update(np.int64(a.ncols).tobytes())
    h.update(np.ascontiguousarray(a.row_ptr, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(a.col_idx, dtype="<i8").tobytes())
    return h.hexdigest()


def save_matrix_market(a: CsrMatrix, path) -> None:
    """Write in Matrix Market coordinate format (1-based, general)."""
    rows = a.entry_rows()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        fh.write(f"{a.nrows} {a.ncols} {a.nnz}\n")
        for r, c, v in zip(rows, a.col_idx, a.vals):
            fh.write(f"{r + 1} {c + 1} {v:.17g}\n")


def load_matrix_market(path) -> CooMatrix:
    """Read a Matrix Market coordinate file written by this package."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("%%MatrixMarket matrix coordinate real"):
            raise ValueError(f"{path}: not a real coordinate MatrixMarket file")
        line = fh.readline()
        while line.startswith("%"):
            line = fh.readline()
        try:
            nrows, ncols, nnz = (int(tok) for tok in line.split())
        except Exception as exc:
            raise ValueError(f"{path}: malformed size line {line!r}") from exc
        rows = np.empty(nnz, dtype=np.int64)
        cols = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz)
        for k in range(nnz):
            toks = fh.readline().split()
            if len(toks) != 3:
                raise ValueError(f"{path}: truncated entry list at entry {k}")
            rows[k] = int(toks[0]) - 1
            cols[k] = int(toks[1]) - 1
            vals[k] = float(toks[2])
    return CooMatrix(nrows, ncols, rows, cols, vals)
