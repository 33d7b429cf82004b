#!/usr/bin/env python3

"""Sparse matrix primitives, Matrix Market I/O, block-row partitions and direct solves."""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, List, Optional, Sequence, TextIO, Tuple, Union
import bisect
import io
import logging

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp

import checks
import parameters

DenseVector = np.ndarray
"""One-dimensional float64 array; a global vector or one node's segment of it."""


class MatrixMarketError(ValueError):
    """Malformed or unsupported Matrix Market input."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class DimensionError(ValueError):
    """Operand shapes do not match."""


class NotSPDError(ValueError):
    """A matrix expected to be symmetric positive-definite is not."""


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """
    Immutable matrix in compressed sparse row form.

    Column indices are strictly increasing within each row. A matrix flagged
    symmetric stores (i, j) iff it stores (j, i), with equal values.
    """
    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    symmetric: bool = False

    def __post_init__(self):
        object.__setattr__(self, "row_offsets", _frozen(self.row_offsets, np.int64))
        object.__setattr__(self, "col_indices", _frozen(self.col_indices, np.int64))
        object.__setattr__(self, "values", _frozen(self.values, np.float64))
        if not checks.check_csr(self.n_rows, self.n_cols, self.row_offsets,
                                self.col_indices, self.values):
            raise ValueError(f"Invalid CSR storage for {self.n_rows}x{self.n_cols} matrix")

    @classmethod
    def from_scipy(cls, matrix, symmetric: Optional[bool] = None) -> "SparseMatrix":
        """
        Build from any scipy sparse matrix, summing duplicates and sorting columns.

        Args:
            matrix: scipy sparse matrix (any format).
            symmetric: Symmetry flag; detected exactly when None.

        Returns:
            The equivalent SparseMatrix.
        """
        csr = sp.csr_matrix(matrix, dtype=np.float64)
        csr.sum_duplicates()
        csr.sort_indices()
        result = cls(csr.shape[0], csr.shape[1], csr.indptr, csr.indices, csr.data)
        if symmetric is None:
            symmetric = checks.is_symmetric(result)
        object.__setattr__(result, "symmetric", bool(symmetric))
        return result

    @classmethod
    def from_dense(cls, dense: np.ndarray, symmetric: Optional[bool] = None) -> "SparseMatrix":
        """Build from a dense array, storing its non-zero entries."""
        return cls.from_scipy(sp.csr_matrix(np.asarray(dense, dtype=np.float64)), symmetric)

    @property
    def nnz(self) -> int:
        return int(self.row_offsets[-1])

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @cached_property
    def _csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values.copy(), self.col_indices.copy(), self.row_offsets.copy()),
                             shape=(self.n_rows, self.n_cols))

    def to_scipy(self) -> sp.csr_matrix:
        """Return a scipy CSR view sharing this matrix's (copied, cached) storage."""
        return self._csr

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def diagonal(self) -> np.ndarray:
        return self._csr.diagonal()

    def row_block(self, start: int, end: int) -> "SparseMatrix":
        """Rows [start, end) with global column numbering kept."""
        lo, hi = self.row_offsets[start], self.row_offsets[end]
        return SparseMatrix(end - start, self.n_cols, self.row_offsets[start:end + 1] - lo,
                            self.col_indices[lo:hi], self.values[lo:hi])

    def equals(self, other: "SparseMatrix") -> bool:
        """Exact equality of shape, pattern and values."""
        return (self.shape == other.shape
                and np.array_equal(self.row_offsets, other.row_offsets)
                and np.array_equal(self.col_indices, other.col_indices)
                and np.array_equal(self.values, other.values))

    def row_columns(self) -> np.ndarray:
        """Sorted distinct columns holding at least one stored entry."""
        return np.unique(self.col_indices)


def vstack_rows(blocks: Sequence[SparseMatrix]) -> SparseMatrix:
    """Stack row blocks sharing a column count into one matrix."""
    if not blocks:
        raise DimensionError("Cannot stack an empty list of row blocks")
    n_cols = blocks[0].n_cols
    if any(block.n_cols != n_cols for block in blocks):
        raise DimensionError("Row blocks disagree on the column count")
    return SparseMatrix.from_scipy(sp.vstack([b.to_scipy() for b in blocks], format="csr"),
                                   symmetric=False)


@dataclass(frozen=True)
class BlockRowPartition:
    """Contiguous row blocks [start, end) assigned one per node, in node order."""
    node_count: int
    ranges: Tuple[Tuple[int, int], ...]
    starts: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.ranges) != self.node_count:
            raise ValueError("Partition needs one range per node")
        if not checks.covers_range(self.ranges, self.ranges[-1][1] if self.ranges else 0):
            raise ValueError(f"Ranges do not tile a contiguous interval: {self.ranges}")
        object.__setattr__(self, "starts", _frozen([r[0] for r in self.ranges], np.int64))

    @property
    def n(self) -> int:
        return self.ranges[-1][1]

    def size(self, node: int) -> int:
        start, end = self.ranges[node]
        return end - start

    def sizes(self) -> List[int]:
        return [end - start for start, end in self.ranges]

    def indices(self, node: int) -> np.ndarray:
        start, end = self.ranges[node]
        return np.arange(start, end, dtype=np.int64)

    def owner_of(self, index: int) -> int:
        if not 0 <= index < self.n:
            raise IndexError(f"Index {index} outside [0, {self.n})")
        return bisect.bisect_right(self.starts.tolist(), index) - 1

    def owners(self, indices: np.ndarray) -> np.ndarray:
        """Vectorised owner lookup for sorted or unsorted global indices."""
        return np.searchsorted(self.starts, np.asarray(indices), side="right") - 1

    def union_indices(self, nodes: Iterable[int]) -> np.ndarray:
        """Sorted union of the index sets of the given nodes."""
        parts = [self.indices(node) for node in sorted(set(nodes))]
        if not parts:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(parts)


_READ_ERRORS = (ValueError, IndexError, TypeError, OverflowError, RuntimeError)


def _entry_lines(lines: List[str]) -> List[Tuple[int, str]]:
    """(1-based line number, text) of every entry line after the size line."""
    data = [(number, line) for number, line in enumerate(lines[1:], start=2)
            if line.strip() and not line.lstrip().startswith("%")]
    return data[1:]


def _first_bad_entry(entries: List[Tuple[int, str]], n_rows: int, n_cols: int) -> Optional[Tuple[int, str]]:
    for number, line in entries:
        tokens = line.split()
        if len(tokens) != 3:
            return number, f"expected 'row col value', got {line.strip()!r}"
        try:
            row, col = int(tokens[0]), int(tokens[1])
            float(tokens[2])
        except ValueError:
            return number, f"non-numeric entry {line.strip()!r}"
        if not (1 <= row <= n_rows and 1 <= col <= n_cols):
            return number, f"index ({row}, {col}) outside {n_rows}x{n_cols}"
    return None


def parse_matrix_market(text: Union[str, TextIO]) -> SparseMatrix:
    """
    Parse a Matrix Market coordinate file into CSR form.

    Symmetric inputs are expanded to full storage and duplicate entries summed.
    The header is read with scipy.io.mminfo and the body with scipy.io.mmread;
    when the reader rejects the body, the entry lines are scanned to name the
    offending line.

    Args:
        text: File contents or an open text stream.

    Returns:
        The parsed matrix; flagged symmetric when the file says so or the
        entries are exactly symmetric.

    Raises:
        MatrixMarketError: Malformed header, bad entry, index out of bounds,
            unsupported field or symmetry.
    """
    content = text if isinstance(text, str) else text.read()
    lines = content.splitlines()
    if not lines or not lines[0].lower().startswith("%%matrixmarket"):
        raise MatrixMarketError(1, "missing %%MatrixMarket banner")
    source = content.encode("utf-8")
    try:
        n_rows, n_cols, declared, fmt, value_field, symmetry = scipy.io.mminfo(io.BytesIO(source))
    except _READ_ERRORS as exc:
        raise MatrixMarketError(1, f"malformed header: {exc}") from exc
    if fmt != "coordinate":
        raise MatrixMarketError(1, f"unsupported format {fmt!r}, expected 'coordinate'")
    if value_field not in ("real", "integer"):
        raise MatrixMarketError(1, f"unsupported field {value_field!r}, expected real")
    if symmetry not in ("general", "symmetric"):
        raise MatrixMarketError(1, f"unsupported symmetry {symmetry!r}")

    entries = _entry_lines(lines)
    if len(entries) != declared:
        raise MatrixMarketError(len(lines), f"declared {declared} entries, found {len(entries)}")

    try:
        matrix = SparseMatrix.from_scipy(scipy.io.mmread(io.BytesIO(source)),
                                         symmetric=True if symmetry == "symmetric" else None)
    except _READ_ERRORS as exc:
        bad = _first_bad_entry(entries, n_rows, n_cols)
        if bad is None:
            raise MatrixMarketError(len(lines), str(exc)) from exc
        raise MatrixMarketError(*bad) from exc

    logging.debug("Parsed %dx%d matrix with %d stored entries (symmetric=%s)",
                  n_rows, n_cols, matrix.nnz, matrix.symmetric)
    return matrix


def load_matrix(path: str) -> SparseMatrix:
    """
    Load a Matrix Market file and validate the structural SPD preconditions.

    Raises:
        MatrixMarketError: The file cannot be parsed.
        NotSPDError: The matrix is not square, not exactly symmetric, or has a
            non-positive diagonal entry.
    """
    with open(path, "r") as f:
        matrix = parse_matrix_market(f)
    require_structurally_spd(matrix)
    logging.info("Loaded %s: n=%d, nnz=%d", path, matrix.n_rows, matrix.nnz)
    return matrix


def require_structurally_spd(matrix: SparseMatrix) -> None:
    """Raise NotSPDError unless the matrix is square, exactly symmetric and has a positive diagonal."""
    if matrix.n_rows != matrix.n_cols:
        raise NotSPDError(f"Matrix is not square: {matrix.n_rows}x{matrix.n_cols}")
    if not matrix.symmetric and not checks.is_symmetric(matrix):
        raise NotSPDError("Matrix is not exactly symmetric")
    if not checks.has_positive_diagonal(matrix):
        raise NotSPDError("Matrix has a non-positive or missing diagonal entry")


def write_matrix_market(matrix: SparseMatrix, stream: TextIO) -> None:
    """Write coordinate/real format; symmetric matrices as their lower triangle."""
    coo = matrix.to_scipy().tocoo()
    symmetry = "symmetric" if matrix.symmetric else "general"
    keep = coo.row >= coo.col if matrix.symmetric else np.ones(coo.nnz, dtype=bool)
    stream.write(f"%%MatrixMarket matrix coordinate real {symmetry}\n")
    stream.write(f"{matrix.n_rows} {matrix.n_cols} {int(keep.sum())}\n")
    for row, col, value in zip(coo.row[keep], coo.col[keep], coo.data[keep]):
        stream.write(f"{row + 1} {col + 1} {value:.17g}\n")


def partition_rows(n: int, node_count: int) -> BlockRowPartition:
    """
    Split n rows into contiguous blocks, one per node.

    The first n mod node_count nodes own ceil(n / node_count) rows, the rest
    floor(n / node_count).

    Raises:
        ValueError: node_count is zero or exceeds n.
    """
    if node_count < 1 or node_count > n:
        raise ValueError(f"node_count must lie in [1, {n}], got {node_count}")
    base, extra = divmod(n, node_count)
    ranges = []
    start = 0
    for node in range(node_count):
        end = start + base + (1 if node < extra else 0)
        ranges.append((start, end))
        start = end
    return BlockRowPartition(node_count, tuple(ranges))


def spmv(matrix: SparseMatrix, x: DenseVector) -> DenseVector:
    """
    Sparse matrix-vector product with row-wise accumulation in ascending column order.

    Raises:
        DimensionError: len(x) differs from the column count.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != matrix.n_cols:
        raise DimensionError(f"Cannot multiply {matrix.n_rows}x{matrix.n_cols} matrix "
                             f"with vector of shape {x.shape}")
    return matrix.to_scipy() @ x


def extract_submatrix(matrix: SparseMatrix, rows: Sequence[int],
                      cols: Sequence[int]) -> SparseMatrix:
    """
    Select rows and columns, renumbering them by rank within the index sets.

    Raises:
        ValueError: An index set is unsorted, has duplicates or is out of range.
    """
    if not checks.is_sorted_index_set(rows, matrix.n_rows):
        raise ValueError("Row index set must be strictly increasing and in range")
    if not checks.is_sorted_index_set(cols, matrix.n_cols):
        raise ValueError("Column index set must be strictly increasing and in range")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    sub = matrix.to_scipy()[rows, :][:, cols].tocsr()
    sub.sort_indices()
    same_sets = matrix.symmetric and np.array_equal(rows, cols)
    return SparseMatrix(len(rows), len(cols), sub.indptr, sub.indices, sub.data,
                        symmetric=same_sets)


class CholeskyFactor:
    """Dense Cholesky factorization of an SPD matrix, factored once and solved many times."""

    def __init__(self, matrix: SparseMatrix):
        if matrix.n_rows != matrix.n_cols:
            raise DimensionError(f"Cholesky needs a square matrix, got {matrix.shape}")
        self.size = matrix.n_rows
        self._factor = None
        if self.size == 0:
            return
        try:
            self._factor = scipy.linalg.cho_factor(matrix.to_dense(), lower=True)
        except np.linalg.LinAlgError as exc:
            raise NotSPDError(f"Non-positive pivot in Cholesky factorization: {exc}") from exc

    def solve(self, rhs: DenseVector) -> DenseVector:
        rhs = np.asarray(rhs, dtype=np.float64)
        if rhs.shape != (self.size,):
            raise DimensionError(f"Right-hand side of shape {rhs.shape} for size {self.size}")
        if self.size == 0:
            return np.zeros(0)
        return scipy.linalg.cho_solve(self._factor, rhs)


def direct_solve(matrix: SparseMatrix, rhs: DenseVector) -> DenseVector:
    """
    Solve A x = b by dense Cholesky; intended for blocks of at most a few thousand rows.

    Raises:
        DimensionError: Non-square A or mismatched b.
        NotSPDError: A non-positive pivot was met.
    """
    if matrix.n_rows > parameters.DIRECT_SOLVE_THRESHOLD:
        logging.warning("Direct solve on %d rows exceeds the threshold of %d",
                        matrix.n_rows, parameters.DIRECT_SOLVE_THRESHOLD)
    return CholeskyFactor(matrix).solve(rhs)
