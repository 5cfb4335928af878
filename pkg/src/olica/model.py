"""A minimal decoder-only transformer: forward passes, activation capture,
and perplexity evaluation on a byte-level vocabulary.

Blocks are pre-norm with RMS scaling and no biases. Attention is causal
scaled dot-product per head, optionally with rotary position embeddings
on the query/key projections. Weights live in plain numpy arrays so the
pruning machinery can slice and re-factor them directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import HeadWeights, LowRankPair
from .calibrate import LowRankAdapter
from .ffn import FfnWeights

__all__ = [
    "ModelConfig",
    "TransformerBlock",
    "Transformer",
    "ActivationTrace",
    "rmsnorm",
    "softmax_rows",
    "log_softmax_rows",
    "rope_rotate",
    "mha_forward",
    "ffn_apply",
    "ffn_forward",
    "forward",
    "perplexity",
    "tokenize",
    "load_corpus",
    "random_model",
    "model_param_count",
]

RMS_EPS = 1e-6
ROPE_BASE = 10000.0


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int
    d: int
    h: int
    ffn_width: int
    vocab_size: int = 256
    activation: str = "silu"
    gated: bool = True
    rope: bool = False
    max_seq_len: int = 512

    def __post_init__(self):
        for name in ("n_blocks", "d", "h", "ffn_width", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d % self.h != 0:
            raise ValueError(f"d={self.d} must be divisible by h={self.h}")
        if self.activation not in ("relu", "gelu", "silu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.rope and self.d_h % 2 != 0:
            raise ValueError("rotary embeddings need an even head dimension")

    @property
    def d_h(self) -> int:
        return self.d // self.h


@dataclass
class TransformerBlock:
    attn_norm: np.ndarray
    heads: list  # HeadWeights | PrunedHead
    ffn_norm: np.ndarray
    ffn: FfnWeights
    adapter: LowRankAdapter | None = None


@dataclass
class Transformer:
    config: ModelConfig
    embed: np.ndarray  # vocab x d
    blocks: list[TransformerBlock]
    final_norm: np.ndarray
    final_proj: np.ndarray  # d x vocab


@dataclass
class ActivationTrace:
    """Inputs captured at every attention and FFN boundary (post-norm)."""

    n_blocks: int
    mha: list[list[np.ndarray]] = field(default_factory=list)
    ffn: list[list[np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if not self.mha:
            self.mha = [[] for _ in range(self.n_blocks)]
        if not self.ffn:
            self.ffn = [[] for _ in range(self.n_blocks)]

    def record_mha(self, block_idx: int, x: np.ndarray) -> None:
        self.mha[block_idx].append(x)

    def record_ffn(self, block_idx: int, x: np.ndarray) -> None:
        self.ffn[block_idx].append(x)

    def stacked(self, block_idx: int) -> tuple[np.ndarray, np.ndarray]:
        return np.vstack(self.mha[block_idx]), np.vstack(self.ffn[block_idx])


def rmsnorm(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / rms * scale


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _relu(x):
    return np.maximum(x, 0.0)


def _gelu(x):
    # tanh approximation; accurate to ~1e-3 and dependency-free
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _silu(x):
    return x * _sigmoid(x)


ACTIVATIONS = {"relu": _relu, "gelu": _gelu, "silu": _silu}


def rope_rotate(x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Rotate consecutive feature pairs by position-dependent angles.

    The rotation is orthogonal per pair, so per-pair norms are preserved
    and relative position enters the q.k inner product.
    """
    d_h = x.shape[-1]
    inv_freq = ROPE_BASE ** (-np.arange(0, d_h, 2) / d_h)
    angles = positions[:, None] * inv_freq[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _head_projections(head):
    if isinstance(head, HeadWeights):
        return head.wq, head.wk, head.wv, head.wo
    return head.wq, head.wk, head.wv_hat, head.wo_hat


def _project(x: np.ndarray, w) -> np.ndarray:
    if isinstance(w, LowRankPair):
        return (x @ w.w1) @ w.w2
    return x @ w


def _project_t(x: np.ndarray, w) -> np.ndarray:
    if isinstance(w, LowRankPair):
        return (x @ w.w2.T) @ w.w1.T
    return x @ w.T


def mha_forward(block: TransformerBlock, x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Causal multi-head attention over an already-normalized input (n x d)."""
    n = x.shape[0]
    if n > cfg.max_seq_len:
        raise ValueError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
    scale = 1.0 / np.sqrt(cfg.d_h)
    positions = np.arange(n)
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    out = np.zeros_like(x)
    for head in block.heads:
        wq, wk, wv, wo = _head_projections(head)
        q = _project(x, wq)
        k = _project(x, wk)
        if cfg.rope:
            q = rope_rotate(q, positions)
            k = rope_rotate(k, positions)
        scores = (q @ k.T) * scale
        scores = np.where(mask, -np.inf, scores)
        attn = softmax_rows(scores)
        ctx = attn @ _project(x, wv)
        out += _project_t(ctx, wo)
    return out


def ffn_apply(ffn: FfnWeights, x: np.ndarray, activation: str) -> np.ndarray:
    """FFN on an already-normalized input, without any adapter term."""
    act = ACTIVATIONS[activation]
    if ffn.wg is not None:
        inter = (x @ ffn.wu) * act(x @ ffn.wg)
    else:
        inter = act(x @ ffn.wu)
    return inter @ ffn.wd.T


def ffn_forward(block: TransformerBlock, x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    out = ffn_apply(block.ffn, x, cfg.activation)
    if block.adapter is not None:
        out = out + block.adapter.apply(x)
    return out


def forward(
    model: Transformer,
    token_ids,
    trace: ActivationTrace | None = None,
) -> np.ndarray:
    """Logits (n x vocab) for one token sequence, optionally recording the
    post-norm inputs of every attention and FFN sublayer."""
    cfg = model.config
    ids = np.asarray(token_ids)
    if ids.ndim != 1:
        raise ValueError("token_ids must be a 1-D sequence")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        bad = int(ids[(ids < 0) | (ids >= cfg.vocab_size)][0])
        raise ValueError(f"token id {bad} outside vocabulary of size {cfg.vocab_size}")
    x = model.embed[ids]
    for bi, block in enumerate(model.blocks):
        xn = rmsnorm(x, block.attn_norm)
        if trace is not None:
            trace.record_mha(bi, xn)
        x = x + mha_forward(block, xn, cfg)
        xn = rmsnorm(x, block.ffn_norm)
        if trace is not None:
            trace.record_ffn(bi, xn)
        x = x + ffn_forward(block, xn, cfg)
    return rmsnorm(x, model.final_norm) @ model.final_proj


def perplexity(model: Transformer, token_stream, seq_len: int) -> float:
    """exp(mean next-token NLL) over non-overlapping windows of ``seq_len``.

    Window i consumes tokens [i*L, (i+1)*L) and is scored against the
    stream shifted by one, so a stream must hold at least seq_len + 1
    tokens to produce one window.
    """
    stream = np.asarray(token_stream)
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    if stream.size < seq_len + 1:
        raise ValueError(
            f"token stream of length {stream.size} is too short for seq_len {seq_len}"
        )
    n_windows = (stream.size - 1) // seq_len
    total = 0.0
    count = 0
    for w in range(n_windows):
        ids = stream[w * seq_len : (w + 1) * seq_len]
        targets = stream[w * seq_len + 1 : (w + 1) * seq_len + 1]
        logp = log_softmax_rows(forward(model, ids))
        total -= logp[np.arange(seq_len), targets].sum()
        count += seq_len
    return float(np.exp(total / count))


def tokenize(text: str) -> np.ndarray:
    """Byte-level tokenization: UTF-8 bytes as ids in [0, 256)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def load_corpus(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def random_model(cfg: ModelConfig, seed: int = 0, init_scale: float = 0.02) -> Transformer:
    """Seeded random initialization; norms start at 1."""
    rng = np.random.default_rng(seed)

    def mat(rows, cols):
        return rng.normal(0.0, init_scale, size=(rows, cols))

    blocks = []
    for _ in range(cfg.n_blocks):
        heads = [
            HeadWeights(
                wq=mat(cfg.d, cfg.d_h),
                wk=mat(cfg.d, cfg.d_h),
                wv=mat(cfg.d, cfg.d_h),
                wo=mat(cfg.d, cfg.d_h),
            )
            for _ in range(cfg.h)
        ]
        ffn = FfnWeights(
            wu=mat(cfg.d, cfg.ffn_width),
            wd=mat(cfg.d, cfg.ffn_width),
            wg=mat(cfg.d, cfg.ffn_width) if cfg.gated else None,
        )
        blocks.append(
            TransformerBlock(
                attn_norm=np.ones(cfg.d),
                heads=heads,
                ffn_norm=np.ones(cfg.d),
                ffn=ffn,
            )
        )
    return Transformer(
        config=cfg,
        embed=mat(cfg.vocab_size, cfg.d),
        blocks=blocks,
        final_norm=np.ones(cfg.d),
        final_proj=mat(cfg.d, cfg.vocab_size),
    )


def _proj_params(w) -> int:
    if isinstance(w, LowRankPair):
        return w.w1.size + w.w2.size
    return w.size


def model_param_count(model: Transformer) -> int:
    """Exact stored-value count over every tensor, adapters included."""
    total = model.embed.size + model.final_norm.size + model.final_proj.size
    for block in model.blocks:
        total += block.attn_norm.size + block.ffn_norm.size
        for head in block.heads:
            total += sum(_proj_params(w) for w in _head_projections(head))
        total += block.ffn.wu.size + block.ffn.wd.size
        if block.ffn.wg is not None:
            total += block.ffn.wg.size
        if block.adapter is not None:
            total += block.adapter.w1.size + block.adapter.w2.size
    return int(total)
