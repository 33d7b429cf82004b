#!/usr/bin/env python3

"""Desk-scale SPD test matrices and right-hand sides."""

from typing import List, Tuple
import logging

import numpy as np
import scipy.sparse as sp

import parameters
from matrices import SparseMatrix, spmv


def _tridiagonal(n: int) -> sp.csr_matrix:
    return sp.diags([-np.ones(n - 1), 2.0 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1],
                    shape=(n, n), format="csr")


def laplace1d(n: int) -> SparseMatrix:
    """tridiag(-1, 2, -1) of size n."""
    if n < 1:
        raise ValueError(f"laplace1d needs n >= 1, got {n}")
    return SparseMatrix.from_scipy(_tridiagonal(n), symmetric=True)


def laplace2d(k: int) -> SparseMatrix:
    """5-point stencil on a k x k grid, n = k², lexicographic ordering."""
    if k < 1:
        raise ValueError(f"laplace2d needs k >= 1, got {k}")
    identity = sp.identity(k, format="csr")
    stencil = _tridiagonal(k)
    # kron stores the zero blocks explicitly
    matrix = (sp.kron(identity, stencil, format="csr") + sp.kron(stencil, identity, format="csr")).tocsr()
    matrix.eliminate_zeros()
    return SparseMatrix.from_scipy(matrix, symmetric=True)


def band(n: int, half_bandwidth: int, dominance: float, cyclic: bool = True) -> SparseMatrix:
    """
    Strictly diagonally dominant band matrix.

    Off-diagonal entries at distance d are -1/(1+d); the diagonal is the row's
    absolute off-diagonal sum plus `dominance`. The cyclic variant measures
    distance around the ring, so every row has 2b off-diagonal entries.

    Raises:
        ValueError: b < 1, dominance <= 0, or a cyclic band wrapping onto itself.
    """
    if half_bandwidth < 1 or dominance <= 0.0:
        raise ValueError(f"band needs b >= 1 and dominance > 0, got b={half_bandwidth}, "
                         f"dominance={dominance}")
    if cyclic and 2 * half_bandwidth >= n:
        raise ValueError(f"Cyclic band of half-bandwidth {half_bandwidth} overlaps itself for n={n}")
    if not cyclic and half_bandwidth >= n:
        raise ValueError(f"Half-bandwidth {half_bandwidth} must be below n={n}")

    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []
    base = np.arange(n)
    for distance in range(1, half_bandwidth + 1):
        for target in (base + distance, base - distance):
            keep = slice(None) if cyclic else (target >= 0) & (target < n)
            rows.append(base[keep])
            cols.append(np.mod(target, n)[keep])
            vals.append(np.full(len(base[keep]), -1.0 / (1.0 + distance)))
    off = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(n, n)).tocsr()
    diagonal = np.asarray(abs(off).sum(axis=1)).ravel() + dominance
    return SparseMatrix.from_scipy(off + sp.diags(diagonal, format="csr"))


def parse_generator_spec(spec: str) -> Tuple[str, List[str]]:
    name, _, args = spec.strip().partition(":")
    return name.lower(), [a.strip() for a in args.split(",") if a.strip()]


def generate_matrix(spec: str) -> SparseMatrix:
    """
    Build a matrix from "laplace1d:n", "laplace2d:k" or "band:n,b,dominance[,open]".

    Raises:
        ValueError: Unknown generator or invalid parameters.
    """
    name, args = parse_generator_spec(spec)
    try:
        if name == "laplace1d" and len(args) == 1:
            matrix = laplace1d(int(args[0]))
        elif name == "laplace2d" and len(args) == 1:
            matrix = laplace2d(int(args[0]))
        elif name == "band" and len(args) in (3, 4):
            if len(args) == 4 and args[3].lower() not in ("open", "cyclic"):
                raise ValueError(f"Unknown band variant {args[3]!r}")
            cyclic = len(args) == 3 or args[3].lower() == "cyclic"
            matrix = band(int(args[0]), int(args[1]), float(args[2]), cyclic)
        else:
            raise ValueError(f"Unknown generator spec {spec!r}; expected laplace1d:n, "
                             f"laplace2d:k or band:n,b,dominance[,open]")
    except (TypeError, IndexError) as exc:
        raise ValueError(f"Invalid generator spec {spec!r}: {exc}") from exc
    logging.info("Generated %s: n=%d, nnz=%d", spec, matrix.n_rows, matrix.nnz)
    return matrix


def make_rhs(matrix: SparseMatrix, kind: str = "random",
             seed: int = parameters.DEFAULT_SEED) -> Tuple[np.ndarray, np.ndarray]:
    """
    Right-hand side b = A x* for a known solution x*.

    Returns:
        (b, x*); x* is uniform in [-1, 1) from the seed, or all ones.
    """
    if kind == "random":
        solution = np.random.default_rng(seed).uniform(-1.0, 1.0, matrix.n_cols)
    elif kind == "ones":
        solution = np.ones(matrix.n_cols)
    else:
        raise ValueError(f"Unknown right-hand side kind {kind!r}; expected {parameters.RHS_KINDS}")
    return spmv(matrix, solution), solution
