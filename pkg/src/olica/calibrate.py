"""Linear calibration of pruned FFN layers.

Pruning shifts a layer's output and the error compounds as blocks stack.
Where that residual is linearly recoverable from the layer input, a ridge
fit reconstructs it in closed form and a truncated SVD shrinks the fitted
map to a cheap low-rank adapter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import ridge_solve, truncated_factor

__all__ = [
    "ResidualPair",
    "LowRankAdapter",
    "residual",
    "lambda_rule",
    "mc2",
    "fit_adapter",
    "select_layers",
]

# Centering a constant column leaves rounding noise of about eps * |value|;
# anything with spread at or below that level carries no usable signal.
_DEGENERATE_REL = 1e-12


@dataclass(frozen=True)
class ResidualPair:
    """Layer inputs ``x`` (n x d) and the matching output residual ``e``."""

    x: np.ndarray
    e: np.ndarray

    def __post_init__(self):
        if self.x.ndim != 2 or self.e.ndim != 2:
            raise ValueError("x and e must be 2-D")
        if self.x.shape[0] != self.e.shape[0]:
            raise ValueError(f"x has {self.x.shape[0]} rows but e has {self.e.shape[0]}")


@dataclass
class LowRankAdapter:
    """Rank-r correction adding ``x @ w1 @ w2.T`` to a pruned layer's output."""

    w1: np.ndarray  # d x r
    w2: np.ndarray  # d x r
    layer_index: int
    lambda_used: float
    mc2: float

    @property
    def rank(self) -> int:
        return self.w1.shape[1]

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x @ self.w1) @ self.w2.T


def residual(full_out: np.ndarray, pruned_out: np.ndarray) -> np.ndarray:
    """Elementwise difference between the intact and pruned layer outputs."""
    full_out = np.asarray(full_out, dtype=np.float64)
    pruned_out = np.asarray(pruned_out, dtype=np.float64)
    if full_out.shape != pruned_out.shape:
        raise ValueError(f"shapes disagree: {full_out.shape} vs {pruned_out.shape}")
    return full_out - pruned_out


def lambda_rule(x: np.ndarray, lambda0: float) -> float:
    """Ridge strength scaled to the data: lambda0 * mean(diag(X^T X))."""
    if lambda0 < 0:
        raise ValueError("lambda0 must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    return float(lambda0 * np.mean(np.sum(x * x, axis=0)))


def mc2(e: np.ndarray, e_hat: np.ndarray) -> float:
    """Mean over columns of the Pearson correlation between ``e`` and ``e_hat``.

    Columns where either side has (numerically) zero variance contribute 0,
    since a constant residual column holds no linearly recoverable signal.
    The result always lies in [-1, 1].
    """
    e = np.asarray(e, dtype=np.float64)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    if e.shape != e_hat.shape or e.ndim != 2:
        raise ValueError(f"shapes must match and be 2-D: {e.shape} vs {e_hat.shape}")
    n, d = e.shape
    if n < 2:
        raise ValueError("need at least 2 rows to correlate")
    ec = e - e.mean(axis=0)
    hc = e_hat - e_hat.mean(axis=0)
    var_e = np.sum(ec * ec, axis=0)
    var_h = np.sum(hc * hc, axis=0)
    floor_e = (_DEGENERATE_REL * np.sqrt(n) * np.abs(e).max(axis=0, initial=0.0)) ** 2
    floor_h = (_DEGENERATE_REL * np.sqrt(n) * np.abs(e_hat).max(axis=0, initial=0.0)) ** 2
    ok = (var_e > floor_e) & (var_h > floor_h)
    corr = np.zeros(d)
    if np.any(ok):
        corr[ok] = np.sum(ec[:, ok] * hc[:, ok], axis=0) / np.sqrt(var_e[ok] * var_h[ok])
        corr = np.clip(corr, -1.0, 1.0)
    return float(corr.mean())


def fit_adapter(
    pair: ResidualPair,
    lambda0: float,
    rank_ratio: float,
    layer_index: int = 0,
) -> LowRankAdapter:
    """Ridge-fit the residual map and truncate it to a low-rank adapter.

    The recorded mc2 is computed against the full-rank prediction X @ W,
    before truncation; the stored factors satisfy rank r =
    max(1, round(rank_ratio * d)) and predict via x @ w1 @ w2.T.
    """
    if not 0 < rank_ratio <= 1:
        raise ValueError("rank_ratio must lie in (0, 1]")
    lam = lambda_rule(pair.x, lambda0)
    w_hat = ridge_solve(pair.x, pair.e, lam)
    score = mc2(pair.e, pair.x @ w_hat)
    r = max(1, round(rank_ratio * pair.x.shape[1]))
    w1, w2 = truncated_factor(w_hat, r)
    return LowRankAdapter(w1=w1, w2=w2, layer_index=layer_index, lambda_used=lam, mc2=score)


def select_layers(mc2_by_layer, k: int) -> np.ndarray:
    """Indices of the ``k`` most linearly recoverable layers, ascending.

    Ties break toward the lower (shallower) index.
    """
    vals = np.asarray(mc2_by_layer, dtype=np.float64)
    if vals.ndim != 1:
        raise ValueError("mc2_by_layer must be 1-D")
    if not 1 <= k <= vals.shape[0]:
        raise ValueError(f"k={k} out of range [1, {vals.shape[0]}]")
    order = np.argsort(-vals, kind="stable")
    return np.sort(order[:k])
