import numpy as np
import pytest

from olica.ffn import FfnWeights, prune_ffn
from olica.importance import neuron_scores, select_kept, wanda_scores
from olica.model import ffn_apply


def random_ffn(rng, d, m, gated=True):
    return FfnWeights(
        wu=rng.normal(size=(d, m)),
        wd=rng.normal(size=(d, m)),
        wg=rng.normal(size=(d, m)) if gated else None,
    )


class TestPruneFfn:
    def test_keep_all_is_identity(self):
        rng = np.random.default_rng(0)
        ffn = random_ffn(rng, 4, 8)
        x = rng.normal(size=(6, 4))
        pruned = prune_ffn(ffn, x, 8)
        np.testing.assert_array_equal(pruned.wu, ffn.wu)
        np.testing.assert_array_equal(pruned.wd, ffn.wd)
        np.testing.assert_array_equal(pruned.wg, ffn.wg)
        np.testing.assert_allclose(
            ffn_apply(pruned, x, "silu"), ffn_apply(ffn, x, "silu"), atol=1e-12
        )

    def test_dead_neuron_removed_without_output_change(self):
        rng = np.random.default_rng(1)
        ffn = random_ffn(rng, 4, 8, gated=False)
        ffn.wu[:, 5] = 0.0
        ffn.wd[:, 5] = 0.0
        x = rng.normal(size=(6, 4))
        pruned = prune_ffn(ffn, x, 7)
        assert pruned.width == 7
        np.testing.assert_allclose(
            ffn_apply(pruned, x, "relu"), ffn_apply(ffn, x, "relu"), atol=1e-6
        )

    def test_matches_scoring_oracle_and_masking(self):
        rng = np.random.default_rng(2)
        d, m, keep = 8, 32, 16
        ffn = random_ffn(rng, d, m)
        x = rng.normal(size=(20, d))
        scores = neuron_scores(
            wanda_scores(x, ffn.wu), wanda_scores(x, ffn.wd), wanda_scores(x, ffn.wg)
        )
        kept = select_kept(scores, keep)
        pruned = prune_ffn(ffn, x, keep)
        np.testing.assert_array_equal(pruned.wu, ffn.wu[:, kept])
        # masked-original oracle: zero the dropped columns, outputs must agree
        masked = FfnWeights(wu=ffn.wu.copy(), wd=ffn.wd.copy(), wg=ffn.wg.copy())
        dropped = np.setdiff1d(np.arange(m), kept)
        for w in (masked.wu, masked.wd, masked.wg):
            w[:, dropped] = 0.0
        np.testing.assert_allclose(
            ffn_apply(pruned, x, "silu"), ffn_apply(masked, x, "silu"), atol=1e-12
        )

    def test_shape_contract(self):
        rng = np.random.default_rng(3)
        ffn = random_ffn(rng, 4, 10)
        pruned = prune_ffn(ffn, rng.normal(size=(5, 4)), 3)
        assert pruned.wu.shape == (4, 3)
        assert pruned.wd.shape == (4, 3)
        assert pruned.wg.shape == (4, 3)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        ffn = random_ffn(rng, 4, 10)
        x = rng.normal(size=(5, 4))
        a, b = prune_ffn(ffn, x, 6), prune_ffn(ffn, x, 6)
        np.testing.assert_array_equal(a.wu, b.wu)
        np.testing.assert_array_equal(a.wd, b.wd)

    @pytest.mark.parametrize("keep", [0, 11, -1])
    def test_keep_out_of_range(self, keep):
        rng = np.random.default_rng(5)
        with pytest.raises(ValueError):
            prune_ffn(random_ffn(rng, 4, 10), rng.normal(size=(5, 4)), keep)


class TestFfnWeights:
    def test_width_mismatch_rejected(self):
        with pytest.raises(ValueError):
            FfnWeights(wu=np.ones((4, 8)), wd=np.ones((4, 7)))
        with pytest.raises(ValueError):
            FfnWeights(wu=np.ones((4, 8)), wd=np.ones((4, 8)), wg=np.ones((4, 6)))

    def test_gated_flag(self):
        assert FfnWeights(wu=np.ones((2, 3)), wd=np.ones((2, 3))).gated is False
        assert (
            FfnWeights(wu=np.ones((2, 3)), wd=np.ones((2, 3)), wg=np.ones((2, 3))).gated
            is True
        )
