"""Sparse SPD solves.

Matrices are ``scipy.sparse.csr_matrix`` with canonical (sorted, duplicate-free)
column indices.  The production path is Jacobi-preconditioned conjugate
gradients; ``solve_dense`` is a Cholesky reference used by the tests.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import (
    ContractViolationError,
    IndefiniteSystemError,
    InvalidInputError,
    NoConvergenceError,
)

DEFAULT_REL_TOL = 1e-10


def as_csr(A) -> sp.csr_matrix:
    A = sp.csr_matrix(A)
    if not A.has_canonical_format:
        A = A.copy()
        A.sum_duplicates()
        A.sort_indices()
    return A


def is_symmetric(A, tol: float = 1e-13) -> bool:
    """Symmetric to ``tol`` relative to the largest entry."""
    A = as_csr(A)
    if A.shape[0] != A.shape[1]:
        return False
    scale = abs(A).max() if A.nnz else 0.0
    diff = A - A.T
    return diff.nnz == 0 or abs(diff).max() <= tol * scale


def solve_spd(
    A,
    b,
    rel_tol: float = DEFAULT_REL_TOL,
    x0=None,
    max_iter: int | None = None,
    check_symmetric: bool = False,
) -> np.ndarray:
    """Solve ``A x = b`` for SPD ``A`` by Jacobi-preconditioned CG.

    Returns ``x`` with ``||A x - b|| <= rel_tol * ||b||`` measured on the true
    residual.  The iteration cap defaults to ``10 n``.

    Raises
    ------
    NoConvergenceError
        Cap reached; carries the final residual norm.
    IndefiniteSystemError
        Nonpositive diagonal or curvature encountered.
    ContractViolationError
        ``check_symmetric`` set and ``A`` is not symmetric.
    """
    if not 0.0 < rel_tol < 1.0:
        raise InvalidInputError("rel_tol must lie in (0, 1)")
    A = as_csr(A)
    b = np.asarray(b, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or b.shape != (n,):
        raise InvalidInputError(f"shape mismatch: A {A.shape}, b {b.shape}")
    if check_symmetric and not is_symmetric(A):
        raise ContractViolationError("matrix flagged symmetric is not")
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise IndefiniteSystemError("nonpositive diagonal entry in SPD system")

    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    target = rel_tol * bnorm
    max_iter = 10 * n if max_iter is None else max_iter
    inv_d = 1.0 / diag

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    it = 0
    while True:
        if np.linalg.norm(r) <= target:
            return x
        z = inv_d * r
        p = z.copy()
        rz = r @ z
        while it < max_iter:
            it += 1
            Ap = A @ p
            curv = p @ Ap
            if curv <= 0:
                raise IndefiniteSystemError(f"nonpositive curvature {curv:.3e} at CG iteration {it}")
            alpha = rz / curv
            x += alpha * p
            r -= alpha * Ap
            if np.linalg.norm(r) <= target:
                break
            z = inv_d * r
            rz_new = r @ z
            p = z + (rz_new / rz) * p
            rz = rz_new
        # restart from the true residual; the recursive one drifts
        r = b - A @ x
        if np.linalg.norm(r) <= target:
            return x
        if it >= max_iter:
            res = float(np.linalg.norm(r))
            raise NoConvergenceError(
                f"CG did not converge in {max_iter} iterations (residual {res:.3e}, target {target:.3e})",
                residual=res,
            )


def solve_dense(A, b) -> np.ndarray:
    """Dense Cholesky solve; reference path for small systems."""
    Ad = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    try:
        c = scipy.linalg.cho_factor(Ad)
    except np.linalg.LinAlgError as exc:
        raise IndefiniteSystemError(str(exc)) from exc
    return scipy.linalg.cho_solve(c, np.asarray(b, dtype=float))


def axpy_combine(coeffs: Sequence[float], mats: Sequence) -> sp.csr_matrix:
    """Entrywise ``sum(c * A)``.

    When all matrices share one CSR pattern the result keeps that pattern,
    explicit zeros included.
    """
    if len(coeffs) != len(mats) or not mats:
        raise InvalidInputError("need one coefficient per matrix")
    mats = [as_csr(m) for m in mats]
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise InvalidInputError(f"dimension mismatch: {[m.shape for m in mats]}")
    first = mats[0]
    same = all(
        m.nnz == first.nnz
        and np.array_equal(m.indptr, first.indptr)
        and np.array_equal(m.indices, first.indices)
        for m in mats[1:]
    )
    if same:
        data = np.zeros(first.nnz)
        for c, m in zip(coeffs, mats):
            data += c * m.data
        return sp.csr_matrix((data, first.indices.copy(), first.indptr.copy()), shape=shape)
    out = sum((c * m for c, m in zip(coeffs, mats)), sp.csr_matrix(shape))
    return as_csr(out)


def write_coo(A, path) -> None:
    """Dump ``A`` as ``i j value`` lines for debugging."""
    A = sp.coo_matrix(A)
    with open(path, "w") as fh:
        for i, j, v in zip(A.row.tolist(), A.col.tolist(), A.data.tolist()):
            fh.write(f"{i} {j} {v!r}\n")
