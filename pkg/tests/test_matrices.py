#!/usr/bin/env python3

"""Unit tests for matrices module."""

import sys
import os
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import io
import tempfile
import unittest
from unittest.mock import patch
import numpy as np
import scipy.io
from matrices import (CholeskyFactor, DimensionError, MatrixMarketError, NotSPDError, SparseMatrix,
                      direct_solve, extract_submatrix, load_matrix, parse_matrix_market,
                      partition_rows, spmv, vstack_rows, write_matrix_market)
from generators import laplace1d

MATRICES_DIR = os.path.join(os.path.dirname(__file__), '..', 'matrices')

TRIDIAG4_LOWER = """%%MatrixMarket matrix coordinate real symmetric
% tridiagonal test matrix
4 4 7
1 1 2
2 1 -1
2 2 2
3 2 -1
3 3 2
4 3 -1
4 4 2
"""

class TestParseMatrixMarket(unittest.TestCase):
    def test_identity_symmetric(self):
        """Test a 2x2 identity in symmetric coordinate form."""
        text = "%%MatrixMarket matrix coordinate real symmetric\n2 2 2\n1 1 1.0\n2 2 1.0\n"
        matrix = parse_matrix_market(text)
        self.assertEqual(matrix.nnz, 2)
        self.assertEqual(matrix.values.tolist(), [1.0, 1.0])
        self.assertTrue(matrix.symmetric)

    def test_lower_triangle_expansion(self):
        """Test a tridiagonal lower triangle expands to 10 stored entries."""
        matrix = parse_matrix_market(TRIDIAG4_LOWER)
        self.assertEqual(matrix.nnz, 10)
        self.assertTrue(matrix.equals(laplace1d(4)))

    def test_general_duplicates_summed(self):
        """Test duplicate general entries are summed."""
        text = "%%MatrixMarket matrix coordinate real general\n2 2 3\n1 1 1.5\n1 1 0.5\n2 2 1\n"
        matrix = parse_matrix_market(text)
        np.testing.assert_array_equal(matrix.to_dense(), np.diag([2.0, 1.0]))

    def test_complex_field_rejected(self):
        """Test a complex header is rejected on line 1."""
        text = "%%MatrixMarket matrix coordinate complex general\n1 1 1\n1 1 1 0\n"
        with self.assertRaisesRegex(MatrixMarketError, "line 1: unsupported field"):
            parse_matrix_market(text)

    def test_malformed_header(self):
        """Test a missing banner is rejected."""
        with self.assertRaises(MatrixMarketError) as ctx:
            parse_matrix_market("4 4 1\n1 1 1\n")
        self.assertEqual(ctx.exception.line_number, 1)

    def test_index_out_of_bounds_names_line(self):
        """Test an out-of-range index reports its line number."""
        text = "%%MatrixMarket matrix coordinate real general\n% comment\n2 2 2\n1 1 1\n3 1 1\n"
        with self.assertRaises(MatrixMarketError) as ctx:
            parse_matrix_market(text)
        self.assertEqual(ctx.exception.line_number, 5)

    def test_entry_count_mismatch(self):
        """Test a declared entry count that does not match."""
        text = "%%MatrixMarket matrix coordinate real general\n2 2 3\n1 1 1\n2 2 1\n"
        with self.assertRaisesRegex(MatrixMarketError, "declared 3 entries, found 2"):
            parse_matrix_market(text)

    def test_read_through_scipy(self):
        """Test the header and body are read by scipy.io."""
        with patch("matrices.scipy.io.mminfo", wraps=scipy.io.mminfo) as mminfo, \
                patch("matrices.scipy.io.mmread", wraps=scipy.io.mmread) as mmread:
            matrix = parse_matrix_market(TRIDIAG4_LOWER)
        self.assertEqual(mminfo.call_count, 1)
        self.assertEqual(mmread.call_count, 1)
        self.assertTrue(matrix.equals(laplace1d(4)))

    def test_integer_field_and_stream(self):
        """Test integer values read from an open stream."""
        text = "%%MatrixMarket matrix coordinate integer general\n2 2 2\n1 1 3\n2 2 4\n"
        matrix = parse_matrix_market(io.StringIO(text))
        np.testing.assert_array_equal(matrix.to_dense(), np.diag([3.0, 4.0]))

    def test_unsupported_headers(self):
        """Test pattern, array and skew-symmetric files are rejected on line 1."""
        for header, body in (("coordinate pattern general", "2 2 1\n1 1\n"),
                             ("array real general", "1 1\n1.0\n"),
                             ("coordinate real skew-symmetric", "2 2 1\n2 1 1.0\n")):
            with self.assertRaises(MatrixMarketError, msg=header) as ctx:
                parse_matrix_market(f"%%MatrixMarket matrix {header}\n{body}")
            self.assertEqual(ctx.exception.line_number, 1)

    def test_write_and_reload(self):
        """Test a symmetric matrix written as its lower triangle parses back equal."""
        stream = io.StringIO()
        write_matrix_market(laplace1d(6), stream)
        self.assertIn("symmetric", stream.getvalue().splitlines()[0])
        self.assertTrue(parse_matrix_market(stream.getvalue()).equals(laplace1d(6)))

    def test_load_sample_files(self):
        """Test the shipped sample matrices load."""
        tridiag = load_matrix(os.path.join(MATRICES_DIR, "tridiag8.mtx"))
        self.assertTrue(tridiag.equals(laplace1d(8)))
        grid = load_matrix(os.path.join(MATRICES_DIR, "laplace2d_3.mtx"))
        self.assertEqual(grid.nnz, 33)

    def test_load_rejects_nonsymmetric(self):
        """Test load_matrix rejects a general non-symmetric matrix."""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "bad.mtx")
            with open(path, "w") as f:
                f.write("%%MatrixMarket matrix coordinate real general\n2 2 3\n1 1 2\n1 2 1\n2 2 2\n")
            with self.assertRaises(NotSPDError):
                load_matrix(path)

class TestSparseMatrix(unittest.TestCase):
    def test_invalid_csr(self):
        """Test construction rejects malformed CSR arrays."""
        with self.assertRaises(ValueError):
            SparseMatrix(1, 2, np.array([0, 2]), np.array([1, 0]), np.array([1.0, 1.0]))

    def test_arrays_read_only(self):
        """Test the stored arrays cannot be modified."""
        matrix = laplace1d(3)
        with self.assertRaises(ValueError):
            matrix.values[0] = 5.0

    def test_row_block_keeps_global_columns(self):
        """Test row_block keeps global column numbering."""
        block = laplace1d(8).row_block(2, 4)
        self.assertEqual(block.shape, (2, 8))
        self.assertEqual(block.row_columns().tolist(), [1, 2, 3, 4])

    def test_vstack_rows(self):
        """Test stacking row blocks rebuilds the matrix."""
        matrix = laplace1d(8)
        stacked = vstack_rows([matrix.row_block(0, 3), matrix.row_block(3, 8)])
        np.testing.assert_array_equal(stacked.to_dense(), matrix.to_dense())

class TestPartition(unittest.TestCase):
    def test_sizes(self):
        """Test the first n mod N nodes take the larger blocks."""
        self.assertEqual(partition_rows(10, 4).sizes(), [3, 3, 2, 2])
        self.assertEqual(partition_rows(8, 4).sizes(), [2, 2, 2, 2])
        self.assertEqual(partition_rows(5, 5).sizes(), [1, 1, 1, 1, 1])

    def test_random_partitions_cover(self):
        """Test random partitions tile [0, n) with floor or ceil sized blocks."""
        rng = np.random.default_rng(11)
        for _ in range(100):
            n = int(rng.integers(1, 500))
            node_count = int(rng.integers(1, n + 1))
            partition = partition_rows(n, node_count)
            self.assertEqual(partition.ranges[0][0], 0)
            self.assertEqual(partition.n, n)
            for (_, end), (start, _) in zip(partition.ranges, partition.ranges[1:]):
                self.assertEqual(end, start)
            sizes = partition.sizes()
            larger = n % node_count
            self.assertEqual(sizes[:larger], [n // node_count + 1] * larger)
            self.assertEqual(sizes[larger:], [n // node_count] * (node_count - larger))

    def test_invalid_node_count(self):
        """Test node counts of zero or above n are rejected."""
        with self.assertRaises(ValueError):
            partition_rows(4, 0)
        with self.assertRaises(ValueError):
            partition_rows(4, 5)

    def test_owners(self):
        """Test scalar and vectorised owner lookup agree."""
        partition = partition_rows(10, 4)
        owners = partition.owners(np.arange(10))
        self.assertEqual(owners.tolist(), [0, 0, 0, 1, 1, 1, 2, 2, 3, 3])
        self.assertEqual([partition.owner_of(i) for i in range(10)], owners.tolist())
        with self.assertRaises(IndexError):
            partition.owner_of(10)

    def test_union_indices(self):
        """Test the union of index sets is sorted."""
        partition = partition_rows(8, 4)
        self.assertEqual(partition.union_indices([3, 1]).tolist(), [2, 3, 6, 7])
        self.assertEqual(partition.union_indices([]).tolist(), [])

class TestKernels(unittest.TestCase):
    def test_spmv(self):
        """Test SpMV on identity, tridiagonal and zero inputs."""
        np.testing.assert_array_equal(spmv(SparseMatrix.from_dense(np.eye(4)), [1, 2, 3, 4]),
                                      [1.0, 2.0, 3.0, 4.0])
        np.testing.assert_array_equal(spmv(laplace1d(4), np.ones(4)), [1.0, 0.0, 0.0, 1.0])
        np.testing.assert_array_equal(spmv(laplace1d(4), np.zeros(4)), np.zeros(4))

    def test_spmv_dimension_error(self):
        """Test SpMV rejects a vector of the wrong length."""
        with self.assertRaises(DimensionError):
            spmv(laplace1d(4), np.ones(3))

    def test_extract_submatrix(self):
        """Test submatrix extraction with renumbering."""
        matrix = laplace1d(8)
        everything = np.arange(8)
        self.assertTrue(extract_submatrix(matrix, everything, everything).equals(matrix))
        self.assertTrue(extract_submatrix(matrix, [0, 1], [0, 1]).equals(laplace1d(2)))
        corner = extract_submatrix(matrix, [0], [7])
        self.assertEqual(corner.shape, (1, 1))
        self.assertEqual(corner.nnz, 0)

    def test_extract_submatrix_unsorted(self):
        """Test extraction rejects unsorted index sets."""
        with self.assertRaises(ValueError):
            extract_submatrix(laplace1d(8), [1, 0], [0, 1])

    def test_direct_solve(self):
        """Test dense Cholesky solves."""
        np.testing.assert_allclose(direct_solve(SparseMatrix.from_dense(np.eye(4)), [5, 6, 7, 8]),
                                   [5.0, 6.0, 7.0, 8.0])
        np.testing.assert_allclose(direct_solve(laplace1d(2), [1.0, 0.0]), [2.0 / 3.0, 1.0 / 3.0],
                                   rtol=1e-14)

    def test_spmv_matches_triplets(self):
        """Test spmv against a triplet-by-triplet evaluation on random matrices."""
        rng = np.random.default_rng(5)
        for _ in range(20):
            n = int(rng.integers(1, 40))
            # eighths keep every product and partial sum exact
            dense = rng.integers(-8, 9, size=(n, n)) * (rng.random((n, n)) < 0.3) / 8.0
            x = rng.integers(-16, 17, size=n) / 8.0
            matrix = SparseMatrix.from_dense(dense)
            expected = np.zeros(n)
            for row in range(n):
                for k in range(matrix.row_offsets[row], matrix.row_offsets[row + 1]):
                    expected[row] += matrix.values[k] * x[matrix.col_indices[k]]
            np.testing.assert_array_equal(spmv(matrix, x), expected)

    def test_direct_solve_random_spd(self):
        """Test the direct solve round trip on random well-conditioned SPD matrices."""
        rng = np.random.default_rng(8)
        for _ in range(10):
            n = int(rng.integers(1, 65))
            m = rng.uniform(-1.0, 1.0, (n, n))
            gram = m.T @ m
            dense = 0.5 * (gram + gram.T) + n * np.eye(n)
            x = rng.uniform(-1.0, 1.0, n)
            solved = direct_solve(SparseMatrix.from_dense(dense), dense @ x)
            self.assertLessEqual(np.linalg.norm(solved - x) / np.linalg.norm(x), 1e-12)

    def test_direct_solve_not_spd(self):
        """Test a zero diagonal entry raises NotSPDError."""
        with self.assertRaises(NotSPDError):
            direct_solve(SparseMatrix.from_dense(np.diag([1.0, 0.0])), [1.0, 1.0])

    def test_cholesky_reuse(self):
        """Test one factorization serves several right-hand sides."""
        factor = CholeskyFactor(laplace1d(5))
        rng = np.random.default_rng(3)
        for _ in range(3):
            x = rng.standard_normal(5)
            np.testing.assert_allclose(factor.solve(spmv(laplace1d(5), x)), x, rtol=1e-12, atol=1e-12)
        with self.assertRaises(DimensionError):
            factor.solve(np.ones(4))

if __name__ == '__main__':
    unittest.main()
