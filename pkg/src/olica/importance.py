"""Magnitude-times-activation (Wanda style) importance scores and the
selection of which indices survive pruning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import column_norms

__all__ = ["ImportanceVector", "wanda_scores", "neuron_scores", "select_kept"]

FFN_NEURON = "ffn_neuron"
MHA_EIGEN_NEURON = "mha_eigen_neuron"


@dataclass(frozen=True)
class ImportanceVector:
    scores: np.ndarray
    kind: str  # FFN_NEURON or MHA_EIGEN_NEURON


def wanda_scores(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Elementwise importance: score[i, j] = ||x[:, i]|| * |w[i, j]|.

    ``x`` holds the activations that directly multiply ``w`` (n x d against
    d x m), so large inputs and large weights both push a score up.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.ndim != 2 or w.ndim != 2:
        raise ValueError("x and w must be 2-D")
    if x.shape[1] != w.shape[0]:
        raise ValueError(
            f"activation columns ({x.shape[1]}) must match weight rows ({w.shape[0]})"
        )
    return column_norms(x)[:, None] * np.abs(w)


def neuron_scores(
    up_scores: np.ndarray,
    down_scores: np.ndarray,
    gate_scores: np.ndarray | None = None,
    kind: str = FFN_NEURON,
) -> ImportanceVector:
    """Grouped per-neuron importance: column sums over every score matrix
    that touches the shared intermediate index.

    The gate matrix of a gated FFN shares the pruned dimension, so its
    scores enter as a third term when present.
    """
    up_scores = np.asarray(up_scores, dtype=np.float64)
    down_scores = np.asarray(down_scores, dtype=np.float64)
    if up_scores.shape != down_scores.shape:
        raise ValueError(
            f"score shapes disagree: {up_scores.shape} vs {down_scores.shape}"
        )
    total = up_scores + down_scores
    if gate_scores is not None:
        gate_scores = np.asarray(gate_scores, dtype=np.float64)
        if gate_scores.shape != up_scores.shape:
            raise ValueError(
                f"gate score shape {gate_scores.shape} disagrees with {up_scores.shape}"
            )
        total = total + gate_scores
    return ImportanceVector(scores=total.sum(axis=0), kind=kind)


def select_kept(scores, keep: int) -> np.ndarray:
    """Indices of the ``keep`` largest scores, ascending.

    Ties break toward the lower index so pruning is deterministic across
    runs and platforms.
    """
    if isinstance(scores, ImportanceVector):
        scores = scores.scores
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError("scores must be 1-D")
    n = scores.shape[0]
    if not 1 <= keep <= n:
        raise ValueError(f"keep={keep} out of range [1, {n}]")
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:keep])
