"""Dense matrix kernels for low-rank update compression.

SVD with a fixed sign convention, cumulative-energy rank selection,
rank truncation, and least-squares refactorization of a merged layer
against a frozen right factor. Everything runs in double precision;
callers that need a single-precision wire format quantize on send.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SvdResult", "svd", "select_rank", "truncate", "refactor_lstsq"]


def _check_finite(w: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(w)):
        idx = tuple(int(i) for i in np.argwhere(~np.isfinite(w))[0])
        raise ValueError(f"{name} has non-finite entry {w[idx]!r} at index {idx}")


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD of a u-by-v matrix: ``left @ diag(singular) @ right.T``.

    ``left`` is u-by-m and ``right`` is v-by-m with m = min(u, v); the
    columns of each are orthonormal and ``singular`` is non-increasing.
    """

    left: np.ndarray
    singular: np.ndarray
    right: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.left * self.singular) @ self.right.T


def svd(w: np.ndarray) -> SvdResult:
    """Thin SVD with a deterministic sign convention.

    The sign of each singular-vector pair is fixed so that the
    largest-magnitude entry of every left singular vector is
    non-negative, making the factorization reproducible across runs
    and platforms.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-d matrix, got shape {w.shape}")
    _check_finite(w, "matrix")

    left, s, right_t = np.linalg.svd(w, full_matrices=False)
    right = right_t.T

    anchor = np.argmax(np.abs(left), axis=0)
    signs = np.sign(left[anchor, np.arange(left.shape[1])])
    signs[signs == 0] = 1.0
    left = left * signs
    right = right * signs
    return SvdResult(left=left, singular=s, right=right)


def select_rank(s: np.ndarray, alpha: float) -> int:
    """Smallest rank r with ``sum(s[:r]) / sum(s) >= alpha``.

    ``s`` must be sorted non-increasing with non-negative entries and a
    positive total; the ratio uses raw singular values, not squares.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or len(s) == 0:
        raise ValueError("singular values must be a non-empty 1-d vector")
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if np.any(s < 0) or np.any(np.diff(s) > 1e-12 * max(s[0], 1.0)):
        raise ValueError("singular values must be non-negative and sorted non-increasing")
    cum = np.cumsum(s)
    if cum[-1] <= 0.0:
        raise ValueError("degenerate layer: all singular values are zero")
    ratios = cum / cum[-1]
    return int(np.searchsorted(ratios, alpha, side="left")) + 1


def truncate(res: SvdResult, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Split ``res`` at rank r into ``L = U[:, :r] @ diag(s[:r])`` and ``R = V[:, :r].T``.

    ``L @ R`` is the best rank-r Frobenius approximation of the
    decomposed matrix.
    """
    m = len(res.singular)
    if not (1 <= r <= m):
        raise ValueError(f"rank {r} out of range [1, {m}]")
    left = res.left[:, :r] * res.singular[:r]
    right = res.right[:, :r].T
    return left, right


def refactor_lstsq(w_merged: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Solve ``argmin_G ||w_merged - G @ right||_F`` for the left factor.

    ``right`` (r-by-v) must have full row rank; the residual is then
    orthogonal to the row space of ``right``.
    """
    w_merged = np.asarray(w_merged, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    _check_finite(w_merged, "merged matrix")
    _check_finite(right, "right factor")
    r = right.shape[0]
    if w_merged.shape[1] != right.shape[1]:
        raise ValueError(
            f"column mismatch: merged is {w_merged.shape}, right factor is {right.shape}"
        )
    if np.linalg.matrix_rank(right) < r:
        raise ValueError(f"right factor is rank-deficient ({right.shape[0]} rows)")
    solution, *_ = np.linalg.lstsq(right.T, w_merged.T, rcond=None)
    return solution.T
