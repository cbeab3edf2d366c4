"""Deterministic dense linear algebra used by the adapter.

Everything here works on float64 numpy arrays. Singular vectors are put in a
canonical sign so that identical input bytes always give identical output
bytes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TAU = 1e-5


class SvdError(RuntimeError):
    """LAPACK failed to converge on a matrix."""


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    sigma: np.ndarray
    Vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.Vt


@dataclass(frozen=True)
class RankReport:
    numerical_rank: int
    nullity_left: int
    nullity_right: int
    sigma_max: float
    sigma_min: float
    tau: float

    def to_dict(self) -> dict:
        return {
            "rank": self.numerical_rank,
            "nullity_left": self.nullity_left,
            "nullity_right": self.nullity_right,
            "sigma_max": self.sigma_max,
            "sigma_min": self.sigma_min,
            "tau": self.tau,
        }


def as_matrix(M, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting NaN/Inf."""
    arr = np.asarray(M, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D matrix, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: contains non-finite entries")
    return arr


def _column_signs(U: np.ndarray) -> np.ndarray:
    # largest-|entry| of each column made non-negative; argmax picks the
    # lowest row index on ties
    if U.shape[1] == 0:
        return np.ones(0)
    idx = np.argmax(np.abs(U), axis=0)
    return np.where(U[idx, np.arange(U.shape[1])] < 0, -1.0, 1.0)


def _lapack_svd(M: np.ndarray, full: bool, name: str):
    try:
        return np.linalg.svd(M, full_matrices=full)
    except np.linalg.LinAlgError as exc:
        raise SvdError(f"SVD did not converge for {name} (shape {M.shape})") from exc


def svd(M, name: str = "matrix") -> SvdResult:
    """Thin SVD with sigma descending and the canonical sign convention."""
    M = as_matrix(M, name)
    U, sigma, Vt = _lapack_svd(M, False, name)
    signs = _column_signs(U)
    U = U * signs
    Vt = Vt * signs[:, None]
    return SvdResult(np.ascontiguousarray(U), sigma, np.ascontiguousarray(Vt))


def full_svd(M, name: str = "matrix") -> SvdResult:
    """SVD with square U (d_out x d_out) and Vt (d_in x d_in).

    Columns of U (rows of Vt) beyond min(d_out, d_in) are an orthonormal
    completion with no singular value attached; completion rows of Vt get
    the same largest-entry-positive convention as the columns of U.
    """
    M = as_matrix(M, name)
    U, sigma, Vt = _lapack_svd(M, True, name)
    k = sigma.size
    signs = _column_signs(U)
    U = U * signs
    Vt = Vt.copy()
    Vt[:k] *= signs[:k, None]
    if Vt.shape[0] > k:
        Vt[k:] *= _column_signs(Vt[k:].T)[:, None]
    return SvdResult(np.ascontiguousarray(U), sigma, np.ascontiguousarray(Vt))


def numerical_rank(sigma, tau: float = DEFAULT_TAU) -> int:
    """Count singular values strictly above ``tau * sigma[0]``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.size == 0 or sigma[0] == 0:
        return 0
    return int(np.count_nonzero(sigma > tau * sigma[0]))


def rank_report(W, tau: float = DEFAULT_TAU, name: str = "matrix") -> RankReport:
    W = as_matrix(W, name)
    sigma = svd(W, name).sigma
    rank = numerical_rank(sigma, tau)
    d_out, d_in = W.shape
    return RankReport(
        numerical_rank=rank,
        nullity_left=d_out - rank,
        nullity_right=d_in - rank,
        sigma_max=float(sigma[0]) if sigma.size else 0.0,
        sigma_min=float(sigma[-1]) if sigma.size else 0.0,
        tau=tau,
    )


def null_space_left(W, tau: float = DEFAULT_TAU, name: str = "matrix") -> np.ndarray:
    """Orthonormal basis (d_out x nullity_left) of {y : W^T y = 0}."""
    res = full_svd(W, name)
    rank = numerical_rank(res.sigma, tau)
    return np.ascontiguousarray(res.U[:, rank:])


def null_space_right(W, tau: float = DEFAULT_TAU, name: str = "matrix") -> np.ndarray:
    """Orthonormal rows (nullity_right x d_in) spanning {x : W x = 0}."""
    res = full_svd(W, name)
    rank = numerical_rank(res.sigma, tau)
    return np.ascontiguousarray(res.Vt[rank:, :])


def orthonormalize(G: np.ndarray) -> np.ndarray:
    """Householder QR with R's diagonal made non-negative."""
    if G.shape[1] == 0:
        return np.zeros(G.shape)
    Q, R = np.linalg.qr(G)
    d = np.sign(np.diag(R))
    d[d == 0] = 1.0
    return np.ascontiguousarray(Q * d)


def random_orthonormal(rows: int, cols: int, seed) -> np.ndarray:
    """Seeded ``rows x cols`` matrix with orthonormal columns."""
    if cols > rows:
        raise ValueError(f"cannot fit {cols} orthonormal columns in dimension {rows}")
    if cols < 0 or rows < 0:
        raise ValueError("dimensions must be non-negative")
    rng = np.random.default_rng(seed)
    return orthonormalize(rng.standard_normal((rows, cols)))


def max_abs(M) -> float:
    M = np.asarray(M)
    return float(np.max(np.abs(M))) if M.size else 0.0


def orthonormality_error(Q: np.ndarray) -> float:
    """max |Q^T Q - I| for a matrix with (intended) orthonormal columns."""
    return max_abs(Q.T @ Q - np.eye(Q.shape[1]))
