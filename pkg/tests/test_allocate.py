import numpy as np
import pytest

from olica.allocate import (
    allocate,
    awsvd_rank,
    prunable_params,
    qk_cost,
    total_params,
    vo_cost,
)
from olica.errors import BudgetError
from olica.model import ModelConfig

TOY = ModelConfig(
    n_blocks=4, d=64, h=4, ffn_width=256, vocab_size=256,
    activation="silu", gated=True, rope=True, max_seq_len=256,
)


def shape_walk_total(cfg, budget, mode):
    """Independent parameter counter: enumerate every tensor the pruned
    model will store and sum products of its dimensions."""
    lb = budget.per_layer[0]
    total = cfg.vocab_size * cfg.d  # embed
    total += cfg.d * cfg.vocab_size  # final proj
    total += cfg.d  # final norm
    per_block = 2 * cfg.d  # two norm vectors
    # q/k
    if lb.k_qk == cfg.d_h:
        per_block += cfg.h * 2 * cfg.d * cfg.d_h
    else:
        per_block += cfg.h * 2 * (cfg.d * lb.k_qk + lb.k_qk * cfg.d_h)
    # v/o
    if lb.k_vo == cfg.d_h:
        per_block += cfg.h * 2 * cfg.d * cfg.d_h
    elif mode == "awsvd":
        r = awsvd_rank(cfg, lb.k_vo)
        per_block += cfg.h * 2 * (cfg.d * r + r * cfg.d_h)
    else:
        per_block += cfg.h * 2 * cfg.d * lb.k_vo
    # ffn
    n_mats = 3 if cfg.gated else 2
    per_block += n_mats * cfg.d * lb.k_ffn
    return total + cfg.n_blocks * per_block + budget.adapter_params


class TestCounts:
    def test_toy_m1_m2(self):
        assert total_params(TOY) == 295488
        assert prunable_params(TOY) == 262144

    def test_llama_7b_shape_matches_published_counts(self):
        cfg = ModelConfig(
            n_blocks=32, d=4096, h=32, ffn_width=11008, vocab_size=32000,
            gated=True, rope=True, max_seq_len=2048,
        )
        assert abs(total_params(cfg) - 6.74e9) <= 0.01e9
        budget = allocate(cfg, 0.2)
        assert abs(budget.params_allocated - 5.39e9) <= 0.01 * 5.39e9


class TestAllocate:
    def test_s_zero_is_identity(self):
        b = allocate(TOY, 0.0)
        lb = b.per_layer[0]
        assert (lb.k_qk, lb.k_vo, lb.k_ffn) == (TOY.d_h, TOY.d_h, TOY.ffn_width)
        assert b.params_allocated == b.m1
        assert b.achieved_sparsity == 0.0

    def test_s_hat_rescaling(self):
        b = allocate(TOY, 0.2)
        assert b.s_hat == pytest.approx(0.2 * b.m1 / b.m2, rel=1e-12)

    def test_qk_vo_formulas(self):
        for s in (0.1, 0.2, 0.25, 0.33):
            b = allocate(TOY, s)
            lb = b.per_layer[0]
            assert lb.k_qk == max(1, int((1 - 2 * b.s_hat) * TOY.d_h))
            assert lb.k_vo == max(1, int((1 - b.s_hat / 2) * TOY.d_h))

    @pytest.mark.parametrize("s", [0.1, 0.2, 0.25, 0.33])
    @pytest.mark.parametrize("mode", ["fast_ond", "ond", "wanda_only", "awsvd"])
    def test_budget_within_half_percent(self, s, mode):
        b = allocate(TOY, s, mode=mode, adapter_params=2 * TOY.d * 2 * 4)
        assert abs(b.achieved_sparsity - s) <= 0.005
        assert shape_walk_total(TOY, b, mode) == b.params_allocated

    def test_ffn_width_matches_bruteforce_oracle(self):
        for s in (0.1, 0.25, 0.33):
            b = allocate(TOY, s)
            lb = b.per_layer[0]
            fixed = b.m1 - b.m2
            attn = TOY.n_blocks * TOY.h * (
                qk_cost(TOY, lb.k_qk) + vo_cost(TOY, lb.k_vo, "fast_ond")
            )
            target = round((1 - s) * b.m1)
            best = min(
                range(1, TOY.ffn_width + 1),
                key=lambda k: (abs(fixed + attn + TOY.n_blocks * 3 * TOY.d * k - target), k),
            )
            assert lb.k_ffn == best

    def test_monotone_in_s(self):
        dims = [allocate(TOY, s).per_layer[0] for s in np.linspace(0.0, 0.35, 15)]
        for a, b in zip(dims, dims[1:]):
            assert b.k_qk <= a.k_qk and b.k_vo <= a.k_vo and b.k_ffn <= a.k_ffn

    def test_adapter_params_tighten_ffn(self):
        plain = allocate(TOY, 0.25)
        with_adapters = allocate(TOY, 0.25, adapter_params=4096)
        assert with_adapters.per_layer[0].k_ffn < plain.per_layer[0].k_ffn
        assert abs(with_adapters.achieved_sparsity - 0.25) <= 0.005

    def test_out_of_range_sparsity(self):
        for s in (-0.1, 1.0, 1.5):
            with pytest.raises(BudgetError):
                allocate(TOY, s)

    def test_infeasible_qk_share_reports_max(self):
        with pytest.raises(BudgetError, match="maximum achievable"):
            allocate(TOY, 0.45)

    def test_qk_factor_overhead_can_exhaust_ffn(self):
        # single-head layers pay (d + d_h) = 2d per factor rank; with a tiny
        # FFN the back-solve has nothing left to give back
        cfg = ModelConfig(
            n_blocks=1, d=16, h=1, ffn_width=2, vocab_size=8,
            activation="relu", gated=False, rope=False, max_seq_len=8,
        )
        with pytest.raises(BudgetError):
            allocate(cfg, 0.05)

    def test_dry_run_touches_no_tensors(self):
        # feasibility must be decidable from shapes alone
        with pytest.raises(BudgetError):
            allocate(TOY, 0.9)


class TestAwsvdRank:
    def test_budget_equivalence(self):
        # the factor pair must not exceed what column deletion would spend,
        # except where the rank floor of 1 forces the minimum pair
        floor_cost = 2 * (TOY.d + TOY.d_h)
        for k_vo in range(1, TOY.d_h):
            r = awsvd_rank(TOY, k_vo)
            assert r >= 1
            assert 2 * (TOY.d + TOY.d_h) * r <= max(2 * TOY.d * k_vo, floor_cost)
