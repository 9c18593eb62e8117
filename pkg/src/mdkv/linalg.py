"""Dense kernels: validation, row softmax, row norms and a Jacobi eigensolver.

Cache data lives in float32; every reduction here accumulates in float64.
"""
from typing import NamedTuple

import numpy as np

from .exceptions import ContractViolation, NumericalError

STORAGE_DTYPE = np.float32


def as_matrix(x, name="matrix", dtype=STORAGE_DTYPE):
    """Return ``x`` as a finite 2-D array of ``dtype`` or raise ContractViolation."""
    arr = np.asarray(x)
    if arr.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {arr.shape}")
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} contains NaN or Inf")
    return arr


class EigenDecomposition(NamedTuple):
    eigenvalues: np.ndarray  # (D,), descending
    eigenvectors: np.ndarray  # (D, D), columns aligned with eigenvalues


def _round_robin(n):
    """Disjoint (p, q) pairings covering every index pair once per sweep."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < n and b < n]
        p = np.array([a for a, _ in pairs], dtype=np.intp)
        q = np.array([b for _, b in pairs], dtype=np.intp)
        rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _off_norm(a):
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    return np.linalg.norm(off)


def apply_sign_convention(vectors):
    """Flip columns so the largest-magnitude entry (lowest index on ties) is >= 0."""
    vectors = np.array(vectors, dtype=np.float64, copy=True)
    if vectors.size == 0:
        return vectors
    lead = np.argmax(np.abs(vectors), axis=0)
    signs = np.where(vectors[lead, np.arange(vectors.shape[1])] < 0, -1.0, 1.0)
    return vectors * signs


def sym_eig(S, tol=1e-10, max_sweeps=100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in round-robin order so
    that the ``D // 2`` rotations of a round touch disjoint rows and combine
    into one orthogonal matrix applied with two products. Iteration stops
    once the off-diagonal Frobenius norm drops below ``tol * ||S||_F``.

    Returns eigenvalues sorted descending (stable on ties) and unit
    eigenvectors as columns, with the sign convention of
    :func:`apply_sign_convention`.
    """
    a = np.array(S, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractViolation(f"sym_eig needs a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractViolation("sym_eig input contains NaN or Inf")
    n = a.shape[0]
    scale = np.linalg.norm(a)
    if np.linalg.norm(a - a.T) > 1e-6 * max(scale, np.finfo(np.float64).tiny):
        raise ContractViolation("sym_eig input is not symmetric within 1e-6 relative")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    threshold = tol * scale

    rounds = _round_robin(n) if n > 1 else []
    converged = _off_norm(a) <= threshold
    sweeps = 0
    while not converged and sweeps < max_sweeps:
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0.0
            if not np.any(active):
                continue
            p, q, apq = p[active], q[active], apq[active]
            tau = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c

            rot = np.eye(n)
            rot[p, p] = c
            rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            a[p, q] = 0.0
            a[q, p] = 0.0
            v = v @ rot
        sweeps += 1
        converged = _off_norm(a) <= threshold

    if not converged:
        residual = _off_norm(a)
        raise NumericalError(
            f"Jacobi did not converge in {max_sweeps} sweeps (off-diagonal norm {residual:.3e})",
            residual=residual,
        )

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return EigenDecomposition(w[order], apply_sign_convention(v[:, order]))


def softmax_rows(M):
    """Row-wise softmax with per-row max subtraction, computed in float64."""
    m = np.asarray(M, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ContractViolation("softmax_rows input contains NaN or Inf")
    if m.shape[-1] == 0:
        return m.copy()
    z = np.exp(m - m.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def row_norms(M):
    """Euclidean norm of each row, accumulated in float64."""
    m = np.asarray(M, dtype=np.float64)
    return np.sqrt(np.einsum("...ij,...ij->...i", m, m))
