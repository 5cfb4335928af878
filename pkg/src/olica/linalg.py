"""Dense float64 kernels used everywhere else: SVD, truncated and
activation-weighted factorizations, and the closed-form ridge solve.

All functions are pure and never mutate their inputs. Computation is done
in 64-bit precision regardless of how the caller stores weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DecompositionError, SingularityError

__all__ = [
    "SvdResult",
    "svd",
    "truncated_factor",
    "weighted_factor",
    "ridge_solve",
    "column_norms",
]


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(s) @ v.T``.

    ``s`` is nonincreasing and nonnegative; ``u`` (m x k) and ``v`` (n x k)
    have orthonormal columns, k = min(m, n).
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray


def _as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def svd(a: np.ndarray) -> SvdResult:
    """Thin SVD with a deterministic sign convention.

    Each column of ``u`` is flipped (together with the matching column of
    ``v``) so that its largest-magnitude entry is nonnegative. This makes
    the factorization reproducible across runs, which downstream pruning
    relies on for byte-identical outputs.
    """
    a = _as_matrix(a)
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(
            f"SVD did not converge on a {a.shape[0]}x{a.shape[1]} matrix"
        ) from exc
    v = vt.T.copy()
    cols = np.arange(u.shape[1])
    flip = u[np.argmax(np.abs(u), axis=0), cols] < 0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0
    return SvdResult(u=u, s=s, v=v)


def truncated_factor(a: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Best rank-``r`` factorization ``a ~= left @ right.T``.

    ``left = U_r @ diag(s_r)`` (m x r), ``right = V_r`` (n x r). By
    Eckart-Young the Frobenius residual equals the root of the discarded
    singular-value energy.
    """
    a = _as_matrix(a)
    k = min(a.shape)
    if not 1 <= r <= k:
        raise ValueError(f"rank r={r} out of range [1, {k}] for shape {a.shape}")
    res = svd(a)
    left = res.u[:, :r] * res.s[:r]
    right = res.v[:, :r]
    return left, right


def weighted_factor(
    w: np.ndarray, d_diag: np.ndarray, r: int
) -> tuple[np.ndarray, np.ndarray]:
    """Rank-``r`` factorization minimizing ``||(w - w1 @ w2) @ D||_F``.

    ``D = diag(d_diag)`` must be invertible, so every entry of ``d_diag``
    has to be strictly positive. Solved by a plain SVD of ``w @ D``:
    ``w1 = U_r @ diag(s_r)``, ``w2 = V_r.T @ D^-1``. Note the right factor
    comes back as r x n (not transposed), unlike :func:`truncated_factor`.
    """
    w = _as_matrix(w)
    d_diag = np.asarray(d_diag, dtype=np.float64)
    if d_diag.ndim != 1 or d_diag.shape[0] != w.shape[1]:
        raise ValueError(
            f"d_diag must be 1-D with length {w.shape[1]}, got shape {d_diag.shape}"
        )
    if np.any(d_diag <= 0):
        raise ValueError("all d_diag entries must be > 0 (D must be invertible)")
    if not 1 <= r <= min(w.shape):
        raise ValueError(f"rank r={r} out of range [1, {min(w.shape)}]")
    res = svd(w * d_diag)
    w1 = res.u[:, :r] * res.s[:r]
    w2 = res.v[:, :r].T / d_diag
    return w1, w2


def ridge_solve(x: np.ndarray, e: np.ndarray, lam: float) -> np.ndarray:
    """Closed-form ridge solution ``(X^T X + lam I)^-1 X^T E``.

    ``lam = 0`` is allowed only when ``X^T X`` is invertible; a singular or
    hopelessly ill-conditioned system raises :class:`SingularityError`
    instead of returning garbage.
    """
    x = _as_matrix(x, "x")
    e = _as_matrix(e, "e")
    if x.shape[0] != e.shape[0]:
        raise ValueError(f"x has {x.shape[0]} rows but e has {e.shape[0]}")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    gram = x.T @ x + lam * np.eye(x.shape[1])
    rhs = x.T @ e
    try:
        w = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularityError(
            "X^T X is singular; pass lambda > 0 to regularize"
        ) from exc
    # LU can "succeed" on nearly singular systems; reject by the residual
    # of the normal equations rather than trusting the factorization.
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm > 0:
        rel = np.linalg.norm(gram @ w - rhs) / rhs_norm
        if not np.isfinite(rel) or rel > 1e-8:
            raise SingularityError(
                f"normal equations too ill-conditioned (relative residual {rel:.2e}); "
                "increase lambda"
            )
    return w


def column_norms(x: np.ndarray) -> np.ndarray:
    """Euclidean norm of every column of ``x``."""
    x = _as_matrix(x)
    return np.linalg.norm(x, axis=0)
