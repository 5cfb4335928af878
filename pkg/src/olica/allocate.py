"""Translates a whole-model sparsity target into per-matrix kept widths.

The target ``s`` counts the entire model (embeddings and final projection
included) but only attention and FFN matrices are prunable, so the working
ratio is rescaled to s_hat = s * M1 / M2. Query/key pairs then shed twice
s_hat, value/output pairs half of it, and the FFN width is back-solved by
integer search so the final parameter count lands on (1 - s) * M1.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import floor

import numpy as np

from .errors import BudgetError
from .model import ModelConfig

__all__ = ["LayerBudget", "Budget", "allocate", "awsvd_rank"]

# Relative tolerance on the achieved whole-model parameter count.
BUDGET_RTOL = 0.005


@dataclass(frozen=True)
class LayerBudget:
    k_qk: int
    k_vo: int
    k_ffn: int


@dataclass(frozen=True)
class Budget:
    s: float
    m1: int
    m2: int
    s_hat: float
    per_layer: tuple[LayerBudget, ...]
    mode: str
    adapter_params: int
    params_target: int
    params_allocated: int

    @property
    def achieved_sparsity(self) -> float:
        return 1.0 - self.params_allocated / self.m1


def _fixed_params(cfg: ModelConfig) -> int:
    # Everything that is never pruned: embeddings, final projection, norms.
    return (
        cfg.vocab_size * cfg.d * 2  # embed.tok and final.proj
        + cfg.d  # final.norm
        + cfg.n_blocks * 2 * cfg.d  # per-block norm scales
    )


def _ffn_mats(cfg: ModelConfig) -> int:
    return 3 if cfg.gated else 2


def prunable_params(cfg: ModelConfig) -> int:
    """Parameter count of all attention and FFN weight matrices (M2)."""
    per_block = 4 * cfg.d * cfg.d + _ffn_mats(cfg) * cfg.d * cfg.ffn_width
    return cfg.n_blocks * per_block


def total_params(cfg: ModelConfig) -> int:
    """Whole-model parameter count before pruning (M1)."""
    return _fixed_params(cfg) + prunable_params(cfg)


def qk_cost(cfg: ModelConfig, k_qk: int) -> int:
    """Stored values for one head's q and k projections at width k_qk.

    At full width the dense matrices stay as-is; below it each is replaced
    by a rank-k factor pair costing (d + d_h) * k, which is what actually
    lands on disk, not d * k.
    """
    if k_qk == cfg.d_h:
        return 2 * cfg.d * cfg.d_h
    return 2 * (cfg.d + cfg.d_h) * k_qk


def awsvd_rank(cfg: ModelConfig, k_vo: int) -> int:
    """Factor rank for the awsvd ablation spending the same v/o budget
    (2 * d * k_vo per head) as column deletion would."""
    return max(1, (cfg.d * k_vo) // (cfg.d + cfg.d_h))


def vo_cost(cfg: ModelConfig, k_vo: int, mode: str) -> int:
    if k_vo == cfg.d_h:
        return 2 * cfg.d * cfg.d_h
    if mode == "awsvd":
        return 2 * (cfg.d + cfg.d_h) * awsvd_rank(cfg, k_vo)
    return 2 * cfg.d * k_vo


def allocate(
    cfg: ModelConfig,
    s: float,
    mode: str = "fast_ond",
    adapter_params: int = 0,
) -> Budget:
    """Allocate kept widths for a whole-model sparsity target.

    ``adapter_params`` is the fixed number of calibration-adapter values
    that will be added after pruning; it is budgeted here so the shipped
    checkpoint, adapters included, hits the target. Raises BudgetError
    before any tensor is touched when the request is infeasible.
    """
    if not 0.0 <= s < 1.0:
        raise BudgetError(f"sparsity {s} outside [0, 1)")
    m1 = total_params(cfg)
    m2 = prunable_params(cfg)
    s_hat = s * m1 / m2
    if 2.0 * s_hat >= 1.0:
        raise BudgetError(
            f"sparsity {s} is infeasible: the query/key share 2*s_hat reaches "
            f"{2 * s_hat:.3f} >= 1; maximum achievable s is just under {m2 / (2 * m1):.4f}"
        )
    d_h = cfg.d_h
    k_qk = max(1, floor((1.0 - 2.0 * s_hat) * d_h))
    k_vo = max(1, floor((1.0 - s_hat / 2.0) * d_h))

    fixed = _fixed_params(cfg) + adapter_params
    attn_total = cfg.n_blocks * cfg.h * (qk_cost(cfg, k_qk) + vo_cost(cfg, k_vo, mode))
    target = round((1.0 - s) * m1)
    slope = cfg.n_blocks * _ffn_mats(cfg) * cfg.d
    ffn_budget = target - fixed - attn_total
    if ffn_budget < slope / 2.0:
        reachable = 1.0 - (fixed + attn_total + slope) / m1
        raise BudgetError(
            f"sparsity {s} leaves no room for the FFN (width would round below 1); "
            f"maximum achievable s on this model is about {max(reachable, 0.0):.4f}"
        )
    widths = np.arange(1, cfg.ffn_width + 1)
    totals = fixed + attn_total + slope * widths
    k_ffn = int(widths[np.argmin(np.abs(totals - target))])
    allocated = fixed + attn_total + slope * k_ffn
    if abs(allocated - target) > BUDGET_RTOL * m1:
        raise BudgetError(
            f"allocation cannot hit sparsity {s} within {BUDGET_RTOL:.1%}: "
            f"closest achievable parameter count is {allocated} vs target {target}"
        )
    layer = LayerBudget(k_qk=k_qk, k_vo=k_vo, k_ffn=k_ffn)
    return Budget(
        s=s,
        m1=m1,
        m2=m2,
        s_hat=s_hat,
        per_layer=tuple(layer for _ in range(cfg.n_blocks)),
        mode=mode,
        adapter_params=adapter_params,
        params_target=target,
        params_allocated=allocated,
    )
