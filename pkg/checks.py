#!/usr/bin/env python3

"""Verification methods for sparse matrices, index sets and partitions."""

from typing import Iterable, Sequence, Tuple
import numpy as np


def check_csr(n_rows: int, n_cols: int, row_offsets: np.ndarray,
              col_indices: np.ndarray, values: np.ndarray) -> bool:
    """
    Verify that raw CSR arrays describe a well-formed matrix.

    Valid CSR storage must:
    - Have n_rows + 1 row offsets starting at 0 and ending at the entry count.
    - Have non-decreasing row offsets.
    - Have strictly increasing column indices within each row, all below n_cols.
    - Have one value per column index.

    Args:
        n_rows: Number of rows.
        n_cols: Number of columns.
        row_offsets: Row pointer array.
        col_indices: Column index array.
        values: Stored values.

    Returns:
        True if the arrays are consistent, False otherwise.
    """
    if n_rows < 0 or n_cols < 0:
        return False
    if len(row_offsets) != n_rows + 1 or len(col_indices) != len(values):
        return False
    if row_offsets[0] != 0 or row_offsets[-1] != len(col_indices):
        return False
    if np.any(np.diff(row_offsets) < 0):
        return False
    if len(col_indices) and (col_indices.min() < 0 or col_indices.max() >= n_cols):
        return False

    for row in range(n_rows):
        cols = col_indices[row_offsets[row]:row_offsets[row + 1]]
        if len(cols) > 1 and np.any(np.diff(cols) <= 0):
            return False
    return True


def is_sorted_index_set(indices: Sequence[int], bound: int) -> bool:
    """
    Check that an index set is strictly increasing and lies in [0, bound).

    Args:
        indices: Candidate index set.
        bound: Exclusive upper bound.

    Returns:
        True if the set is valid, False otherwise.
    """
    arr = np.asarray(indices)
    if arr.size == 0:
        return True
    if arr.min() < 0 or arr.max() >= bound:
        return False
    return bool(np.all(np.diff(arr) > 0))


def is_symmetric(matrix) -> bool:
    """
    Check exact structural and numerical symmetry of a square matrix.

    Entry (i, j) must be stored iff (j, i) is stored, with bitwise equal values.
    """
    if matrix.n_rows != matrix.n_cols:
        return False
    csr = matrix.to_scipy()
    transposed = csr.transpose().tocsr()
    transposed.sort_indices()
    return (np.array_equal(csr.indptr, transposed.indptr)
            and np.array_equal(csr.indices, transposed.indices)
            and np.array_equal(csr.data, transposed.data))


def has_positive_diagonal(matrix) -> bool:
    """Check that every diagonal entry is stored and strictly positive."""
    diagonal = matrix.diagonal()
    return bool(diagonal.size == matrix.n_rows and np.all(diagonal > 0.0))


def covers_range(ranges: Iterable[Tuple[int, int]], n: int) -> bool:
    """
    Check that half-open ranges are contiguous, ordered, disjoint and cover [0, n).

    Args:
        ranges: Sequence of (start, end) pairs.
        n: Length of the covered interval.

    Returns:
        True if the ranges tile [0, n) in order, False otherwise.
    """
    expected_start = 0
    for start, end in ranges:
        if start != expected_start or end < start:
            return False
        expected_start = end
    return expected_start == n
