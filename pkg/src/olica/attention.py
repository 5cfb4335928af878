"""Attention-layer compression.

The attention output depends on its weights only through the per-head
products W_q W_k^T and W_v W_o^T. Treating W_v W_o^T as one entity and
diagonalizing it yields orthogonal "eigen-neurons" that can be ranked and
pruned without calibration data; the q/k side, where a rotary embedding
may sit between the factors, is compressed by separate activation-weighted
low-rank factorizations instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .importance import MHA_EIGEN_NEURON, neuron_scores, select_kept, wanda_scores
from .linalg import column_norms, svd, weighted_factor

__all__ = [
    "HeadWeights",
    "LowRankPair",
    "PrunedHead",
    "ond",
    "fast_ond",
    "prune_head_vo",
    "factor_qk",
    "activation_weights",
]


@dataclass
class HeadWeights:
    """One attention head's dense projections, each d x d_h."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray


@dataclass
class LowRankPair:
    """Factored projection w ~= w1 @ w2 with w1: in x r, w2: r x out."""

    w1: np.ndarray
    w2: np.ndarray

    @property
    def rank(self) -> int:
        return self.w1.shape[1]

    def full(self) -> np.ndarray:
        return self.w1 @ self.w2


@dataclass
class PrunedHead:
    """A compressed head. q/k may be dense or factored pairs; v/o are the
    (possibly truncated) decomposition factors, or pairs in awsvd mode."""

    wq: np.ndarray | LowRankPair
    wk: np.ndarray | LowRankPair
    wv_hat: np.ndarray | LowRankPair
    wo_hat: np.ndarray | LowRankPair
    k_qk: int
    k_vo: int


def _check_pair_shapes(wv: np.ndarray, wo: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    wv = np.asarray(wv, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    if wv.ndim != 2 or wo.ndim != 2 or wv.shape != wo.shape:
        raise ValueError(f"head matrices must share d x d_h shape, got {wv.shape} and {wo.shape}")
    return wv, wo


def ond(wv: np.ndarray, wo: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonal neuron decomposition of the d x d product wv @ wo.T.

    Returns (wv_hat, wo_hat) = (U Sigma, V) truncated to the product's
    rank-bounding d_h columns, so wv_hat @ wo_hat.T reproduces the product
    exactly and the columns of wo_hat are orthonormal. Cost is the SVD of
    a d x d matrix, which makes this the slow reference path.
    """
    wv, wo = _check_pair_shapes(wv, wo)
    d_h = wv.shape[1]
    res = svd(wv @ wo.T)
    wv_hat = res.u[:, :d_h] * res.s[:d_h]
    wo_hat = res.v[:, :d_h]
    return wv_hat, wo_hat


def fast_ond(wv: np.ndarray, wo: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Product-preserving decomposition via the SVD of wv alone.

    With wv = U Sigma V^T, returns wv_hat = U and wo_hat = wo @ V @ Sigma,
    so wv_hat @ wo_hat.T = wv @ wo.T and wv_hat has orthonormal columns.
    The SVD touches only a d x d_h matrix, cutting the decomposition cost
    by roughly the squared head count relative to :func:`ond`. Truncating
    both factors to r columns projects the product onto U_r's span.
    """
    wv, wo = _check_pair_shapes(wv, wo)
    res = svd(wv)
    wv_hat = res.u
    wo_hat = (wo @ res.v) * res.s
    return wv_hat, wo_hat


def prune_head_vo(
    wv_hat: np.ndarray,
    wo_hat: np.ndarray,
    x: np.ndarray,
    keep: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Keep the ``keep`` highest-importance eigen-neurons of a decomposed
    v/o pair, scoring each column pair against the layer inputs ``x``.

    Both factors keep the same index set so the retained product stays a
    sum of whole rank-1 terms. Returns the two sliced factors plus the
    kept indices (ascending).
    """
    wv_hat, wo_hat = _check_pair_shapes(wv_hat, wo_hat)
    k = wv_hat.shape[1]
    if keep < 1:
        raise ValueError("must keep at least one eigen-neuron")
    if keep > k:
        raise ValueError(f"keep={keep} exceeds available columns {k}")
    scores = neuron_scores(
        wanda_scores(x, wv_hat),
        wanda_scores(x, wo_hat),
        kind=MHA_EIGEN_NEURON,
    )
    kept = select_kept(scores, keep)
    return wv_hat[:, kept], wo_hat[:, kept], kept


def activation_weights(x: np.ndarray | None, d: int) -> np.ndarray:
    """Diagonal of the activation-norm weighting for a d-column input.

    Zero norms are clamped to 1e-12 of the largest norm to keep the
    diagonal invertible; a dead feature contributes nothing either way.
    With no data at all (or an all-zero batch) the weighting degrades to
    the identity, i.e. a plain SVD.
    """
    if x is None:
        return np.ones(d)
    norms = column_norms(x)
    if norms.shape[0] != d:
        raise ValueError(f"activations have {norms.shape[0]} features, expected {d}")
    top = norms.max()
    if top == 0.0:
        return np.ones(d)
    return np.maximum(norms, 1e-12 * top)


def _weighted_lowrank(w: np.ndarray, weights: np.ndarray, r: int) -> LowRankPair:
    # Minimize ||diag(weights) @ (w - w1 @ w2)||_F by factoring w.T with the
    # weights on its column side.
    w1t, w2t = weighted_factor(w.T, weights, r)
    return LowRankPair(w1=w2t.T, w2=w1t.T)


def factor_qk(
    wq: np.ndarray,
    wk: np.ndarray,
    x: np.ndarray | None,
    keep: int,
) -> tuple[LowRankPair, LowRankPair]:
    """Independent rank-``keep`` factorizations of the query and key
    projections, weighted by the column norms of the layer inputs.

    The two matrices are factored separately because a position-dependent
    rotation may sit between them in the attention product, ruling out a
    joint decomposition of wq @ wk.T.
    """
    wq = np.asarray(wq, dtype=np.float64)
    wk = np.asarray(wk, dtype=np.float64)
    if wq.shape != wk.shape or wq.ndim != 2:
        raise ValueError(f"wq and wk must share d x d_h shape, got {wq.shape} and {wk.shape}")
    d, d_h = wq.shape
    if not 1 <= keep <= d_h:
        raise ValueError(f"keep={keep} out of range [1, {d_h}]")
    weights = activation_weights(x, d)
    return _weighted_lowrank(wq, weights, keep), _weighted_lowrank(wk, weights, keep)
