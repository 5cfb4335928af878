"""Structured pruning of FFN intermediate neurons."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .importance import neuron_scores, select_kept, wanda_scores

__all__ = ["FfnWeights", "prune_ffn"]


@dataclass
class FfnWeights:
    """Up/down (and optional gate) projections, all d x m."""

    wu: np.ndarray
    wd: np.ndarray
    wg: np.ndarray | None = None

    def __post_init__(self):
        if self.wu.shape != self.wd.shape:
            raise ValueError(f"wu {self.wu.shape} and wd {self.wd.shape} must match")
        if self.wg is not None and self.wg.shape != self.wu.shape:
            raise ValueError(f"wg {self.wg.shape} must match wu {self.wu.shape}")

    @property
    def width(self) -> int:
        return self.wu.shape[1]

    @property
    def gated(self) -> bool:
        return self.wg is not None


def prune_ffn(ffn: FfnWeights, x: np.ndarray, keep: int) -> FfnWeights:
    """Delete the lowest-importance intermediate neurons, keeping ``keep``.

    Every matrix sharing the intermediate axis contributes its scores and
    is sliced by the same kept set, so the pruned layer computes exactly
    the original layer with the dropped neurons' contributions removed.
    """
    m = ffn.width
    if not 1 <= keep <= m:
        raise ValueError(f"keep={keep} out of range [1, {m}]")
    gate = wanda_scores(x, ffn.wg) if ffn.wg is not None else None
    scores = neuron_scores(wanda_scores(x, ffn.wu), wanda_scores(x, ffn.wd), gate)
    kept = select_kept(scores, keep)
    return FfnWeights(
        wu=ffn.wu[:, kept],
        wd=ffn.wd[:, kept],
        wg=ffn.wg[:, kept] if ffn.wg is not None else None,
    )
