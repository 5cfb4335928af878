"""End-to-end pruning pipeline and the eval/inspect entry points.

A run selects calibratable FFN layers first (by their multiple correlation
coefficient on the unpruned model), then walks blocks in order: factor the
query/key projections, decompose and prune the value/output pair in the
configured mode, slim the FFN, attach a low-rank adapter on selected
layers, and feed the (by default pruned and calibrated) outputs forward as
the next block's calibration inputs.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .allocate import Budget, allocate, awsvd_rank, total_params
from .attention import (
    PrunedHead,
    activation_weights,
    factor_qk,
    fast_ond,
    ond,
    prune_head_vo,
    _weighted_lowrank,
)
from .calibrate import (
    ResidualPair,
    fit_adapter,
    lambda_rule,
    mc2,
    residual,
    select_layers,
)
from .checkpoint import PruneConfig, read_manifest
from .errors import BudgetError, ConfigError, DecompositionError
from .ffn import prune_ffn
from .importance import MHA_EIGEN_NEURON, neuron_scores, select_kept, wanda_scores
from .linalg import ridge_solve
from .model import (
    ModelConfig,
    Transformer,
    TransformerBlock,
    ffn_apply,
    ffn_forward,
    mha_forward,
    model_param_count,
    perplexity,
    rmsnorm,
)

__all__ = [
    "LayerRecord",
    "PruneReport",
    "EvalResult",
    "sample_calibration",
    "prune_model",
    "eval_model",
    "inspect_checkpoint",
]


@dataclass
class LayerRecord:
    layer: int
    k_qk: int
    k_vo: int
    k_ffn: int
    mc2_selection: float | None
    calibrated: bool
    adapter_rank: int | None
    lambda_used: float | None
    mc2_fit: float | None

    def meta(self) -> dict:
        return {
            "k_qk": self.k_qk,
            "k_vo": self.k_vo,
            "k_ffn": self.k_ffn,
            "mc2_selection": self.mc2_selection,
            "calibrated": self.calibrated,
            "adapter_rank": self.adapter_rank,
            "lambda": self.lambda_used,
            "mc2_fit": self.mc2_fit,
        }


@dataclass
class PruneReport:
    sparsity_requested: float
    sparsity_achieved: float
    params_before: int
    params_after: int
    mode: str
    propagate: str
    seed: int
    lambda0: float
    rank_ratio: float
    calib_layers: int
    n_samples: int
    seq_len: int
    layers: list[LayerRecord]
    phase_seconds: dict[str, float] = field(default_factory=dict)
    ppl_before: float | None = None
    ppl_after: float | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["layers"] = [asdict(l) for l in self.layers]
        return out

    def pruning_meta(self) -> dict:
        """Deterministic subset stored in the checkpoint manifest."""
        return {
            "sparsity_requested": self.sparsity_requested,
            "sparsity_achieved": self.sparsity_achieved,
            "mode": self.mode,
            "propagate": self.propagate,
            "seed": self.seed,
            "lambda0": self.lambda0,
            "rank_ratio": self.rank_ratio,
            "calib_layers": self.calib_layers,
            "n_samples": self.n_samples,
            "seq_len": self.seq_len,
            "per_layer": [l.meta() for l in self.layers],
        }


@dataclass
class EvalResult:
    perplexity: float
    seconds: float
    n_tokens: int
    seq_len: int


def sample_calibration(tokens, n_samples: int, seq_len: int, seed: int) -> np.ndarray:
    """Seeded draw of ``n_samples`` windows of ``seq_len`` tokens."""
    tokens = np.asarray(tokens)
    if tokens.size < seq_len:
        raise ConfigError(
            f"calibration stream holds {tokens.size} tokens, need at least {seq_len}"
        )
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, tokens.size - seq_len + 1, size=n_samples)
    return np.stack([tokens[s : s + seq_len] for s in starts])


def _attn_inputs(blocks_x: np.ndarray, block: TransformerBlock) -> np.ndarray:
    return rmsnorm(blocks_x, block.attn_norm)


def _apply_attn(block: TransformerBlock, cfg: ModelConfig, xs, xns) -> np.ndarray:
    return xs + np.stack([mha_forward(block, xn, cfg) for xn in xns])


def _apply_ffn(block: TransformerBlock, cfg: ModelConfig, xs, xns) -> np.ndarray:
    return xs + np.stack([ffn_forward(block, xn, cfg) for xn in xns])


def _compress_vo(head, x: np.ndarray, k_vo: int, mode: str, cfg: ModelConfig):
    """Mode dispatch for the value/output pair of one head."""
    wv, wo = head.wv, head.wo
    if k_vo == cfg.d_h:
        return wv, wo
    if mode in ("ond", "fast_ond"):
        decompose = ond if mode == "ond" else fast_ond
        wv_hat, wo_hat = decompose(wv, wo)
        wv_hat, wo_hat, _ = prune_head_vo(wv_hat, wo_hat, x, k_vo)
        return wv_hat, wo_hat
    if mode == "wanda_only":
        scores = neuron_scores(
            wanda_scores(x, wv), wanda_scores(x, wo), kind=MHA_EIGEN_NEURON
        )
        kept = select_kept(scores, k_vo)
        return wv[:, kept], wo[:, kept]
    if mode == "awsvd":
        r = awsvd_rank(cfg, k_vo)
        weights = activation_weights(x, cfg.d)
        return _weighted_lowrank(wv, weights, r), _weighted_lowrank(wo, weights, r)
    raise ConfigError(f"unknown mode {mode!r}")


def _selection_pass(
    model: Transformer,
    config: PruneConfig,
    budget: Budget,
    samples: np.ndarray,
) -> list[float]:
    """Per-layer MC2 from trial-pruning on the unpruned model's activations."""
    cfg = model.config
    xs = model.embed[samples]
    values = []
    for l, block in enumerate(model.blocks):
        xn_a = _attn_inputs(xs, block)
        xs = _apply_attn(block, cfg, xs, xn_a)
        xn_f = rmsnorm(xs, block.ffn_norm)
        x_flat = xn_f.reshape(-1, cfg.d)
        k_ffn = budget.per_layer[l].k_ffn
        if k_ffn < block.ffn.width:
            trial = prune_ffn(block.ffn, x_flat, k_ffn)
            err = residual(
                ffn_apply(block.ffn, x_flat, cfg.activation),
                ffn_apply(trial, x_flat, cfg.activation),
            )
            w_hat = ridge_solve(x_flat, err, lambda_rule(x_flat, config.lambda0))
            values.append(mc2(err, x_flat @ w_hat))
        else:
            values.append(0.0)
        xs = _apply_ffn(block, cfg, xs, xn_f)
    return values


def prune_model(
    model: Transformer,
    config: PruneConfig,
    calib_tokens,
    eval_tokens=None,
) -> tuple[Transformer, PruneReport]:
    """Run the full pipeline; the input model is never mutated.

    ``eval_tokens``, when given, adds before/after perplexity (at the
    config's sequence length) to the report.
    """
    cfg = model.config
    config.validate(cfg.n_blocks)
    # Nothing is removed at s=0, so the residuals are exactly zero and
    # adapters would only add parameters; skip calibration entirely.
    n_calib = config.resolved_calib_layers(cfg.n_blocks) if config.sparsity > 0 else 0
    adapter_rank = max(1, round(config.rank_ratio * cfg.d))
    budget = allocate(
        cfg, config.sparsity, config.mode, adapter_params=2 * cfg.d * adapter_rank * n_calib
    )
    samples = sample_calibration(calib_tokens, config.n_samples, config.seq_len, config.seed)
    phases: dict[str, float] = {
        "mc2_pass": 0.0,
        "forward": 0.0,
        "qk_factor": 0.0,
        "vo_decomp": 0.0,
        "ffn_prune": 0.0,
        "calibration": 0.0,
    }
    params_before = model_param_count(model)
    ppl_before = (
        perplexity(model, eval_tokens, config.seq_len) if eval_tokens is not None else None
    )

    mc2_by_layer: list[float] | None = None
    selected: set[int] = set()
    if n_calib > 0:
        t0 = time.perf_counter()
        mc2_by_layer = _selection_pass(model, config, budget, samples)
        selected = set(int(i) for i in select_layers(mc2_by_layer, n_calib))
        phases["mc2_pass"] += time.perf_counter() - t0

    propagate_pruned = config.propagate == "pruned"
    xs = model.embed[samples]
    new_blocks: list[TransformerBlock] = []
    records: list[LayerRecord] = []
    for l, block in enumerate(model.blocks):
        lb = budget.per_layer[l]
        t0 = time.perf_counter()
        xn_a = _attn_inputs(xs, block)
        x_attn = xn_a.reshape(-1, cfg.d)
        phases["forward"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        if lb.k_qk == cfg.d_h:
            qk_pairs = [(head.wq, head.wk) for head in block.heads]
        else:
            qk_pairs = []
            for hi, head in enumerate(block.heads):
                try:
                    qk_pairs.append(factor_qk(head.wq, head.wk, x_attn, lb.k_qk))
                except DecompositionError as exc:
                    raise DecompositionError(
                        f"q/k factorization failed at block {l}, head {hi}: {exc}"
                    ) from exc
        phases["qk_factor"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        vo_pairs = []
        for hi, head in enumerate(block.heads):
            try:
                vo_pairs.append(_compress_vo(head, x_attn, lb.k_vo, config.mode, cfg))
            except DecompositionError as exc:
                raise DecompositionError(
                    f"v/o decomposition failed at block {l}, head {hi}: {exc}"
                ) from exc
        phases["vo_decomp"] += time.perf_counter() - t0

        if lb.k_qk == cfg.d_h and lb.k_vo == cfg.d_h:
            new_heads = block.heads
        else:
            new_heads = [
                PrunedHead(wq=q, wk=k, wv_hat=v, wo_hat=o, k_qk=lb.k_qk, k_vo=lb.k_vo)
                for (q, k), (v, o) in zip(qk_pairs, vo_pairs)
            ]

        attn_block = TransformerBlock(
            attn_norm=block.attn_norm,
            heads=new_heads,
            ffn_norm=block.ffn_norm,
            ffn=block.ffn,
        )
        t0 = time.perf_counter()
        x_mid = _apply_attn(attn_block if propagate_pruned else block, cfg, xs, xn_a)
        xn_f = rmsnorm(x_mid, block.ffn_norm)
        x_ffn = xn_f.reshape(-1, cfg.d)
        phases["forward"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        if lb.k_ffn < block.ffn.width:
            new_ffn = prune_ffn(block.ffn, x_ffn, lb.k_ffn)
        else:
            new_ffn = block.ffn
        phases["ffn_prune"] += time.perf_counter() - t0

        adapter = None
        if l in selected:
            t0 = time.perf_counter()
            err = residual(
                ffn_apply(block.ffn, x_ffn, cfg.activation),
                ffn_apply(new_ffn, x_ffn, cfg.activation),
            )
            adapter = fit_adapter(
                ResidualPair(x=x_ffn, e=err),
                config.lambda0,
                config.rank_ratio,
                layer_index=l,
            )
            phases["calibration"] += time.perf_counter() - t0

        new_block = TransformerBlock(
            attn_norm=block.attn_norm,
            heads=new_heads,
            ffn_norm=block.ffn_norm,
            ffn=new_ffn,
            adapter=adapter,
        )
        new_blocks.append(new_block)

        t0 = time.perf_counter()
        xs = _apply_ffn(new_block if propagate_pruned else block, cfg, x_mid, xn_f)
        phases["forward"] += time.perf_counter() - t0

        records.append(
            LayerRecord(
                layer=l,
                k_qk=lb.k_qk,
                k_vo=lb.k_vo,
                k_ffn=lb.k_ffn,
                mc2_selection=None if mc2_by_layer is None else float(mc2_by_layer[l]),
                calibrated=adapter is not None,
                adapter_rank=adapter.rank if adapter else None,
                lambda_used=float(adapter.lambda_used) if adapter else None,
                mc2_fit=float(adapter.mc2) if adapter else None,
            )
        )

    pruned = Transformer(
        config=cfg,
        embed=model.embed,
        blocks=new_blocks,
        final_norm=model.final_norm,
        final_proj=model.final_proj,
    )
    params_after = model_param_count(pruned)
    if params_after != budget.params_allocated:
        raise BudgetError(
            f"internal accounting mismatch: allocated {budget.params_allocated} "
            f"parameters but produced {params_after}"
        )
    achieved = 1.0 - params_after / params_before
    if abs(achieved - config.sparsity) > 0.005:
        raise BudgetError(
            f"achieved sparsity {achieved:.4f} misses request {config.sparsity:.4f} "
            "by more than 0.5%"
        )
    report = PruneReport(
        sparsity_requested=float(config.sparsity),
        sparsity_achieved=float(achieved),
        params_before=params_before,
        params_after=params_after,
        mode=config.mode,
        propagate=config.propagate,
        seed=config.seed,
        lambda0=float(config.lambda0),
        rank_ratio=float(config.rank_ratio),
        calib_layers=n_calib,
        n_samples=config.n_samples,
        seq_len=config.seq_len,
        layers=records,
        phase_seconds={k: float(v) for k, v in phases.items()},
        ppl_before=ppl_before,
        ppl_after=(
            perplexity(pruned, eval_tokens, config.seq_len)
            if eval_tokens is not None
            else None
        ),
    )
    return pruned, report


def eval_model(model: Transformer, tokens, seq_len: int) -> EvalResult:
    tokens = np.asarray(tokens)
    t0 = time.perf_counter()
    ppl = perplexity(model, tokens, seq_len)
    return EvalResult(
        perplexity=ppl,
        seconds=time.perf_counter() - t0,
        n_tokens=int(tokens.size),
        seq_len=seq_len,
    )


def _layer_dims_from_shapes(tensors: dict, cfg: ModelConfig, l: int) -> dict:
    p = f"blocks.{l}"

    def width(base: str) -> int:
        if base in tensors:
            return tensors[base]["shape"][1] // cfg.h
        return tensors[f"{base}.w1"]["shape"][1] // cfg.h

    dims = {
        "k_qk": width(f"{p}.attn.wq"),
        "k_vo": width(f"{p}.attn.wv"),
        "k_ffn": tensors[f"{p}.ffn.wu"]["shape"][1],
    }
    if f"{p}.ffn.adapter.w1" in tensors:
        dims["adapter_rank"] = tensors[f"{p}.ffn.adapter.w1"]["shape"][1]
    return dims


def inspect_checkpoint(path) -> dict:
    """Structure and budget report straight from the manifest; the tensor
    payload is never read and no inference runs."""
    manifest = read_manifest(path)
    cfg = ModelConfig(**manifest["config"])
    tensors = manifest["tensors"]
    param_count = int(sum(int(np.prod(e["shape"])) for e in tensors.values()))
    original = total_params(cfg)
    return {
        "config": manifest["config"],
        "param_count": param_count,
        "param_count_unpruned": original,
        "sparsity": 1.0 - param_count / original,
        "per_layer": [_layer_dims_from_shapes(tensors, cfg, l) for l in range(cfg.n_blocks)],
        "pruning": manifest.get("pruning"),
        "tensors": {name: e["shape"] for name, e in sorted(tensors.items())},
    }
