"""Sparse matrices, randomized truncated SVD, and varimax rotation.

These are the numerical primitives behind the divisive query clustering:
each cluster node fits a rank-B subspace of its members' sparse count
matrix and rotates it so every row loads on as few axes as possible.
"""

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateInputError, DimensionError, NumericError


# ---------------------------------------------------------------------------
# Sparse matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SparseMatrix:
    """Compressed-sparse-row matrix with validated structure."""

    n_rows: int
    n_cols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        if self.n_rows < 0 or self.n_cols < 0:
            raise DimensionError("negative matrix dimensions")
        if len(self.indptr) != self.n_rows + 1:
            raise DimensionError("indptr length must be n_rows + 1")
        if np.any(np.diff(self.indptr) < 0):
            raise DimensionError("row offsets must be non-decreasing")
        if len(self.indices) != len(self.data):
            raise DimensionError("indices and data length mismatch")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= self.n_cols):
            raise DimensionError("column index out of range")
        for r in range(self.n_rows):
            row = self.indices[self.indptr[r]:self.indptr[r + 1]]
            if np.any(np.diff(row) <= 0):
                raise DimensionError(f"row {r}: column indices must be strictly increasing")
        if not np.all(np.isfinite(self.data)):
            raise NumericError("sparse matrix values must be finite")

    @classmethod
    def from_rows(cls, rows, n_cols):
        """Build from an iterable of {col: value} dicts."""
        indptr = [0]
        indices = []
        data = []
        for row in rows:
            for col in sorted(row):
                indices.append(col)
                data.append(row[col])
            indptr.append(len(indices))
        return cls(
            n_rows=len(indptr) - 1,
            n_cols=n_cols,
            indptr=np.asarray(indptr, dtype=np.int64),
            indices=np.asarray(indices, dtype=np.int64),
            data=np.asarray(data, dtype=np.float64),
        )

    @classmethod
    def from_scipy(cls, mat):
        csr = sp.csr_matrix(mat)
        csr.sort_indices()
        return cls(
            n_rows=csr.shape[0],
            n_cols=csr.shape[1],
            indptr=csr.indptr.astype(np.int64),
            indices=csr.indices.astype(np.int64),
            data=csr.data.astype(np.float64),
        )

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.data, self.indices, self.indptr), shape=(self.n_rows, self.n_cols)
        )

    def to_dense(self) -> np.ndarray:
        return np.asarray(self.to_scipy().todense())

    @property
    def nnz(self):
        return len(self.data)


# ---------------------------------------------------------------------------
# Subspace model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubspaceModel:
    """Rank-k projection: x -> (x @ basis) @ rotation.

    `basis` holds the top right singular vectors (column-orthonormal),
    `rotation` the varimax rotation (identity until fitted), and
    `feature_means` is an unused centering hook.
    """

    basis: np.ndarray          # n_cols x k
    singular_values: np.ndarray
    rotation: np.ndarray       # k x k orthogonal
    feature_means: np.ndarray = None

    @property
    def k(self):
        return self.basis.shape[1]

    def with_rotation(self, rotation):
        return replace(self, rotation=np.asarray(rotation, dtype=np.float64))


def project(model: SubspaceModel, x):
    """Project one (sparse or dense) row vector into the rotated subspace."""
    if sp.issparse(x):
        if x.shape[1] != model.basis.shape[0]:
            raise DimensionError(
                f"vector has {x.shape[1]} dims, basis expects {model.basis.shape[0]}"
            )
        return np.asarray((x @ model.basis) @ model.rotation).ravel()
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != model.basis.shape[0]:
        raise DimensionError(
            f"vector has {x.shape[0]} dims, basis expects {model.basis.shape[0]}"
        )
    return (x @ model.basis) @ model.rotation


def project_rows(model: SubspaceModel, X):
    """Project a whole (sparse) matrix of rows at once."""
    if X.shape[1] != model.basis.shape[0]:
        raise DimensionError("matrix column count does not match basis")
    return np.asarray(X @ model.basis) @ model.rotation


# ---------------------------------------------------------------------------
# Randomized truncated SVD
# ---------------------------------------------------------------------------

def truncated_svd(X, k, oversample=10, power_iters=2, seed=0) -> SubspaceModel:
    """Rank-k SVD via Gaussian sketching with subspace iteration.

    Deterministic for a fixed seed. Orthonormalizes after every pass so
    the power iterations stay numerically stable.
    """
    if isinstance(X, SparseMatrix):
        X = X.to_scipy()
    n_rows, n_cols = X.shape
    if k <= 0 or k > min(n_rows, n_cols):
        raise DimensionError(f"k={k} must be in [1, min({n_rows}, {n_cols})]")
    nnz = X.nnz if sp.issparse(X) else np.count_nonzero(X)
    if nnz == 0:
        raise DegenerateInputError("all-zero matrix has no rank-k factorization")

    rng = np.random.default_rng(seed)
    width = min(k + max(0, oversample), min(n_rows, n_cols))
    omega = rng.standard_normal((n_cols, width))

    Y = np.asarray(X @ omega)
    Q, _ = np.linalg.qr(Y)
    for _ in range(max(0, power_iters)):
        Z = np.asarray(X.T @ Q)
        Qz, _ = np.linalg.qr(Z)
        Y = np.asarray(X @ Qz)
        Q, _ = np.linalg.qr(Y)

    B = np.asarray(Q.T @ X)  # width x n_cols
    _, s, vt = np.linalg.svd(B, full_matrices=False)
    basis = vt[:k].T.copy()
    singular_values = s[:k].copy()
    return SubspaceModel(
        basis=basis,
        singular_values=singular_values,
        rotation=np.eye(k),
    )


# ---------------------------------------------------------------------------
# Varimax rotation
# ---------------------------------------------------------------------------

def varimax_criterion(loadings) -> float:
    """Sum over columns of the variance of squared loadings."""
    sq = np.asarray(loadings, dtype=np.float64) ** 2
    return float(np.sum(sq.var(axis=0)))


def sign_normalize_columns(rotated, rotation):
    """Flip column signs so each column's largest-magnitude entry is positive."""
    rotated = np.array(rotated, dtype=np.float64)
    rotation = np.array(rotation, dtype=np.float64)
    for j in range(rotated.shape[1]):
        col = rotated[:, j]
        if col.size and col[np.argmax(np.abs(col))] < 0:
            rotated[:, j] = -col
            rotation[:, j] = -rotation[:, j]
    return rotated, rotation


def varimax(loadings, max_iters=100, tol=1e-6):
    """Raw varimax: returns (rotation, rotated = loadings @ rotation).

    The SVD-of-gradient scheme keeps the criterion non-decreasing; the
    loop stops when the relative criterion change drops below `tol`.
    """
    A = np.asarray(loadings, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] < 1:
        raise DimensionError("loadings must be an n x k matrix with k >= 1")
    if not np.all(np.isfinite(A)):
        raise NumericError("non-finite loadings")
    n, k = A.shape
    if k == 1:
        return np.eye(1), A.copy()

    def iterate(R0):
        R = R0
        crit = varimax_criterion(A @ R)
        for _ in range(max_iters):
            B = A @ R
            G = A.T @ (B ** 3 - B * (np.sum(B ** 2, axis=0) / n))
            if np.linalg.norm(G) < 1e-15:
                break
            u, _, vt = np.linalg.svd(G)
            candidate = u @ vt
            new_crit = varimax_criterion(A @ candidate)
            if new_crit < crit:
                break  # keep the previous (better) rotation
            R = candidate
            if crit > 0 and (new_crit - crit) < tol * crit:
                crit = new_crit
                break
            crit = new_crit
        return R, crit

    # The identity start can sit on an unstable stationary point (e.g. a
    # simple structure rotated by exactly 45 degrees), so also try a few
    # seeded random orthogonal starts and keep the best criterion.
    best_R, best_crit = iterate(np.eye(k))
    for start_seed in (1, 2):
        rng = np.random.default_rng(start_seed)
        Q0, _ = np.linalg.qr(rng.standard_normal((k, k)))
        R, crit = iterate(Q0)
        if crit > best_crit + 1e-12:
            best_R, best_crit = R, crit

    rotated, R = sign_normalize_columns(A @ best_R, best_R)
    return R, rotated
