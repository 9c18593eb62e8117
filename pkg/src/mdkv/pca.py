"""Per-head PCA bases with nested storage at maximum rank."""
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ContractViolation
from .linalg import as_matrix, sym_eig

DEFAULT_RATIOS = (0.0, 0.125, 0.25, 1.0)


@dataclass(frozen=True)
class RatioSet:
    """Candidate compression ratios and the head dimensions they map to."""

    ratios: tuple
    head_dim: int
    dims: tuple = field(init=False)

    def __post_init__(self):
        ratios = tuple(float(r) for r in self.ratios)
        if any(not 0.0 <= r <= 1.0 for r in ratios):
            raise ContractViolation(f"ratios must lie in [0, 1], got {ratios}")
        if 0.0 not in ratios or 1.0 not in ratios:
            raise ContractViolation("ratio set must contain both 0 and 1")
        if self.head_dim < 1:
            raise ContractViolation("head_dim must be positive")
        ratios = tuple(sorted(set(ratios)))
        dims = sorted({int(np.floor(r * self.head_dim + 0.5)) for r in ratios})
        object.__setattr__(self, "ratios", ratios)
        object.__setattr__(self, "dims", tuple(dims))

    @property
    def max_stored_rank(self):
        """Largest candidate dim strictly below the head dimension."""
        return max(d for d in self.dims if d < self.head_dim)

    @property
    def intermediate_dims(self):
        return tuple(d for d in self.dims if 0 < d < self.head_dim)

    def ratio_of(self, dim):
        return dim / self.head_dim


@dataclass(frozen=True)
class ProjectionBasis:
    """Leading eigenvectors of ``X^T X / N``, stored once at ``max_rank``."""

    basis: np.ndarray  # (D, max_rank), float64
    eigenvalues: np.ndarray  # (max_rank,)

    @property
    def head_dim(self):
        return self.basis.shape[0]

    @property
    def max_rank(self):
        return self.basis.shape[1]


def fit_basis(X, max_rank):
    X = as_matrix(X, "X", dtype=None)
    n, d = X.shape
    if n < 1:
        raise ContractViolation("cannot fit a basis on an empty matrix")
    if not 0 <= max_rank <= d:
        raise ContractViolation(f"max_rank must be in [0, {d}], got {max_rank}")
    x = X.astype(np.float64)
    eig = sym_eig(x.T @ x / n)
    return ProjectionBasis(
        basis=eig.eigenvectors[:, :max_rank].copy(),
        eigenvalues=eig.eigenvalues[:max_rank].copy(),
    )


def fit_joint_basis(heads, max_rank):
    """Fit one basis over the column-concatenation of several heads."""
    heads = [as_matrix(h, "head", dtype=None) for h in heads]
    if not heads:
        raise ContractViolation("need at least one head")
    if len({h.shape for h in heads}) != 1:
        raise ContractViolation(f"heads must share shape, got {[h.shape for h in heads]}")
    return fit_basis(np.concatenate(heads, axis=1), max_rank)


def slice_basis(basis, r):
    if not 0 <= r <= basis.max_rank:
        raise ContractViolation(f"rank {r} outside [0, {basis.max_rank}]")
    return basis.basis[:, :r]


def project(X, basis, r):
    p = slice_basis(basis, r)
    X = np.asarray(X)
    if X.shape[-1] != p.shape[0]:
        raise ContractViolation(f"X has {X.shape[-1]} columns, basis expects {p.shape[0]}")
    return X.astype(np.float64) @ p


def reconstruct(X_c, basis, r):
    p = slice_basis(basis, r)
    X_c = np.asarray(X_c)
    if X_c.shape[-1] != r:
        raise ContractViolation(f"compressed rows have width {X_c.shape[-1]}, expected {r}")
    return X_c.astype(np.float64) @ p.T


def projection_error(X, basis, r):
    """Squared Frobenius error of projecting ``X`` onto the rank-``r`` subspace."""
    x = np.asarray(X, dtype=np.float64)
    return float(np.sum((x - reconstruct(project(x, basis, r), basis, r)) ** 2))


class HeadPCA(TransformerMixin, BaseEstimator):
    """Uncentered PCA over ``X^T X / N`` with nested components.

    Parameters
    ----------
    n_components : int or None
        Number of components kept; ``None`` keeps all of them.

    Attributes
    ----------
    components_ : ndarray of shape (n_features, n_components)
        Orthonormal columns, leading first.
    eigenvalues_ : ndarray of shape (n_components,)
    """

    def __init__(self, n_components=None):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=[np.float32, np.float64])
        rank = X.shape[1] if self.n_components is None else self.n_components
        self.basis_ = fit_basis(X, rank)
        self.components_ = self.basis_.basis
        self.eigenvalues_ = self.basis_.eigenvalues
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X, rank=None):
        check_is_fitted(self)
        X = check_array(X, dtype=[np.float32, np.float64])
        return project(X, self.basis_, self.basis_.max_rank if rank is None else rank)

    def inverse_transform(self, X_c):
        check_is_fitted(self)
        X_c = check_array(X_c, dtype=[np.float32, np.float64], ensure_min_features=0)
        return reconstruct(X_c, self.basis_, X_c.shape[1])
