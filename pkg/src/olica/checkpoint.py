"""Single-file tensor container and the pruning run configuration.

Layout: ``[u64 little-endian header length][UTF-8 JSON manifest][payload]``
with the payload holding contiguous little-endian float32 tensors in
sorted-name order. The manifest carries the model config, a name -> shape/
offset table, and optional pruning metadata, so a pruned checkpoint is
fully self-describing without reading the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .attention import HeadWeights, LowRankPair, PrunedHead
from .calibrate import LowRankAdapter
from .errors import (
    CheckpointDataError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
)
from .ffn import FfnWeights
from .model import ModelConfig, Transformer, TransformerBlock

__all__ = [
    "MAGIC",
    "VERSION",
    "MODES",
    "PruneConfig",
    "save_checkpoint",
    "load_checkpoint",
    "read_manifest",
]

MAGIC = "olica-checkpoint"
VERSION = 1

MODES = ("ond", "fast_ond", "wanda_only", "awsvd")
PROPAGATE_CHOICES = ("pruned", "unpruned")


@dataclass
class PruneConfig:
    """Everything a pruning run needs besides the model and the corpus."""

    sparsity: float
    lambda0: float = 0.5
    rank_ratio: float = 0.03
    calib_layers: int | None = None  # None: min(6, n_blocks)
    mode: str = "fast_ond"
    propagate: str = "pruned"
    seed: int = 0
    calib_path: str | None = None  # None: bundled training corpus
    n_samples: int = 256
    seq_len: int = 128

    def validate(self, n_blocks: int) -> None:
        if not 0.0 <= self.sparsity < 1.0:
            raise ConfigError(f"sparsity {self.sparsity} outside [0, 1)")
        if self.lambda0 < 0:
            raise ConfigError("lambda0 must be >= 0")
        if not 0.0 < self.rank_ratio <= 1.0:
            raise ConfigError("rank_ratio must lie in (0, 1]")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.propagate not in PROPAGATE_CHOICES:
            raise ConfigError(
                f"propagate must be one of {PROPAGATE_CHOICES}, got {self.propagate!r}"
            )
        if self.n_samples < 1 or self.seq_len < 1:
            raise ConfigError("n_samples and seq_len must be >= 1")
        k = self.resolved_calib_layers(n_blocks)
        if not 0 <= k <= n_blocks:
            raise ConfigError(f"calib_layers {k} must lie in [0, {n_blocks}]")

    def resolved_calib_layers(self, n_blocks: int) -> int:
        if self.calib_layers is None:
            return min(6, n_blocks)
        return self.calib_layers

    @classmethod
    def from_json(cls, path, overrides: dict | None = None) -> "PruneConfig":
        """Load from a JSON file, with explicit flag values winning."""
        with open(path) as f:
            raw = json.load(f)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if overrides:
            raw.update({k: v for k, v in overrides.items() if v is not None})
        if "sparsity" not in raw:
            raise ConfigError("config must provide 'sparsity'")
        return cls(**raw)


def _collect_tensors(model: Transformer) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {
        "embed.tok": model.embed,
        "final.norm": model.final_norm,
        "final.proj": model.final_proj,
    }
    for l, block in enumerate(model.blocks):
        p = f"blocks.{l}"
        tensors[f"{p}.attn.norm"] = block.attn_norm
        tensors[f"{p}.ffn.norm"] = block.ffn_norm
        for name in ("wq", "wk", "wv", "wo"):
            parts = [_head_slot(head, name) for head in block.heads]
            if all(isinstance(w, np.ndarray) for w in parts):
                tensors[f"{p}.attn.{name}"] = np.concatenate(parts, axis=1)
            elif all(isinstance(w, LowRankPair) for w in parts):
                tensors[f"{p}.attn.{name}.w1"] = np.concatenate([w.w1 for w in parts], axis=1)
                tensors[f"{p}.attn.{name}.w2"] = np.concatenate([w.w2 for w in parts], axis=0)
            else:
                raise CheckpointShapeError(
                    f"{p}.attn.{name}: heads mix dense and factored forms"
                )
        tensors[f"{p}.ffn.wu"] = block.ffn.wu
        tensors[f"{p}.ffn.wd"] = block.ffn.wd
        if block.ffn.wg is not None:
            tensors[f"{p}.ffn.wg"] = block.ffn.wg
        if block.adapter is not None:
            tensors[f"{p}.ffn.adapter.w1"] = block.adapter.w1
            tensors[f"{p}.ffn.adapter.w2"] = block.adapter.w2
    return tensors


def _head_slot(head, name: str):
    if isinstance(head, HeadWeights):
        return getattr(head, name)
    mapping = {"wq": head.wq, "wk": head.wk, "wv": head.wv_hat, "wo": head.wo_hat}
    return mapping[name]


def save_checkpoint(model: Transformer, path, pruning_meta: dict | None = None) -> None:
    """Write a deterministic container: same model, same bytes.

    Tensors are stored float32 in sorted-name order with a canonical JSON
    manifest (sorted keys, no whitespace).
    """
    tensors = _collect_tensors(model)
    entries = {}
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries[name] = {
            "shape": list(arr.shape),
            "dtype": "f32",
            "offset": len(payload),
            "nbytes": arr.nbytes,
        }
        payload += arr.tobytes()
    manifest = {
        "format": MAGIC,
        "version": VERSION,
        "config": asdict(model.config),
        "tensors": entries,
        "pruning": pruning_meta,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(bytes(payload))


def read_manifest(path) -> dict:
    """Parse only the header; the payload is never touched."""
    with open(path, "rb") as f:
        prefix = f.read(8)
        if len(prefix) < 8:
            raise CheckpointVersionError(f"{path}: too short to hold a header length")
        (header_len,) = struct.unpack("<Q", prefix)
        header = f.read(header_len)
    if len(header) < header_len:
        raise CheckpointTruncatedError(f"{path}: header cut short")
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointVersionError(f"{path}: manifest is not valid JSON") from exc
    if manifest.get("format") != MAGIC:
        raise CheckpointVersionError(
            f"{path}: not an {MAGIC} file (format={manifest.get('format')!r})"
        )
    if manifest.get("version") != VERSION:
        raise CheckpointVersionError(
            f"{path}: unsupported version {manifest.get('version')!r}, expected {VERSION}"
        )
    return manifest


def _read_payload(path) -> bytes:
    with open(path, "rb") as f:
        (header_len,) = struct.unpack("<Q", f.read(8))
        f.seek(8 + header_len)
        return f.read()


def _extract(name: str, entry: dict, payload: bytes) -> np.ndarray:
    shape = tuple(entry["shape"])
    offset, nbytes = entry["offset"], entry["nbytes"]
    if offset < 0 or offset + nbytes > len(payload):
        raise CheckpointTruncatedError(
            f"tensor {name!r} spans bytes [{offset}, {offset + nbytes}) but payload "
            f"holds only {len(payload)}"
        )
    expected = int(np.prod(shape)) * 4
    if nbytes != expected:
        raise CheckpointShapeError(
            f"tensor {name!r}: shape {shape} needs {expected} bytes, manifest says {nbytes}"
        )
    arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset)
    arr = arr.reshape(shape).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise CheckpointDataError(f"tensor {name!r} contains non-finite values")
    return arr


def _split_cols(arr: np.ndarray, h: int, name: str) -> list[np.ndarray]:
    if arr.shape[1] % h != 0:
        raise CheckpointShapeError(f"{name}: {arr.shape[1]} columns not divisible by {h} heads")
    k = arr.shape[1] // h
    return [arr[:, i * k : (i + 1) * k] for i in range(h)]


def _split_rows(arr: np.ndarray, h: int, name: str) -> list[np.ndarray]:
    if arr.shape[0] % h != 0:
        raise CheckpointShapeError(f"{name}: {arr.shape[0]} rows not divisible by {h} heads")
    k = arr.shape[0] // h
    return [arr[i * k : (i + 1) * k, :] for i in range(h)]


def _load_projection(tensors: dict, base: str, cfg: ModelConfig):
    """Return per-head ndarrays or LowRankPairs for one of wq/wk/wv/wo."""
    if base in tensors:
        arr = tensors[base]
        if arr.shape[0] != cfg.d:
            raise CheckpointShapeError(f"{base}: expected {cfg.d} rows, got {arr.shape[0]}")
        parts = _split_cols(arr, cfg.h, base)
        if parts[0].shape[1] > cfg.d_h:
            raise CheckpointShapeError(
                f"{base}: per-head width {parts[0].shape[1]} exceeds d_h {cfg.d_h}"
            )
        return parts
    if f"{base}.w1" in tensors and f"{base}.w2" in tensors:
        w1 = tensors[f"{base}.w1"]
        w2 = tensors[f"{base}.w2"]
        if w1.shape[0] != cfg.d or w2.shape[1] != cfg.d_h:
            raise CheckpointShapeError(
                f"{base}: factor shapes {w1.shape} x {w2.shape} inconsistent with "
                f"d={cfg.d}, d_h={cfg.d_h}"
            )
        w1s = _split_cols(w1, cfg.h, f"{base}.w1")
        w2s = _split_rows(w2, cfg.h, f"{base}.w2")
        if w1s[0].shape[1] != w2s[0].shape[0]:
            raise CheckpointShapeError(f"{base}: factor ranks disagree across w1/w2")
        return [LowRankPair(w1=a, w2=b) for a, b in zip(w1s, w2s)]
    raise CheckpointShapeError(f"missing tensor {base} (or its .w1/.w2 factors)")


def _proj_width(w) -> int:
    return w.rank if isinstance(w, LowRankPair) else w.shape[1]


def load_checkpoint(path) -> Transformer:
    """Materialize a model, validating shapes and finiteness of every tensor."""
    manifest = read_manifest(path)
    payload = _read_payload(path)
    try:
        cfg = ModelConfig(**manifest["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointShapeError(f"{path}: bad model config: {exc}") from exc
    tensors = {
        name: _extract(name, entry, payload)
        for name, entry in manifest["tensors"].items()
    }

    def need(name: str, shape: tuple) -> np.ndarray:
        if name not in tensors:
            raise CheckpointShapeError(f"missing tensor {name!r}")
        arr = tensors[name]
        if arr.shape != shape:
            raise CheckpointShapeError(
                f"tensor {name!r}: expected shape {shape}, got {arr.shape}"
            )
        return arr

    pruning = manifest.get("pruning") or {}
    per_layer_meta = pruning.get("per_layer") or [{}] * cfg.n_blocks

    blocks = []
    for l in range(cfg.n_blocks):
        p = f"blocks.{l}"
        wq = _load_projection(tensors, f"{p}.attn.wq", cfg)
        wk = _load_projection(tensors, f"{p}.attn.wk", cfg)
        wv = _load_projection(tensors, f"{p}.attn.wv", cfg)
        wo = _load_projection(tensors, f"{p}.attn.wo", cfg)
        if [_proj_width(w) for w in wq] != [_proj_width(w) for w in wk]:
            raise CheckpointShapeError(f"{p}: wq and wk widths disagree")
        if [_proj_width(w) for w in wv] != [_proj_width(w) for w in wo]:
            raise CheckpointShapeError(f"{p}: wv and wo widths disagree")
        k_qk = _proj_width(wq[0])
        k_vo = _proj_width(wv[0])
        dense_full = (
            k_qk == cfg.d_h
            and k_vo == cfg.d_h
            and all(isinstance(w, np.ndarray) for w in wq + wk + wv + wo)
        )
        if dense_full:
            heads = [HeadWeights(*ws) for ws in zip(wq, wk, wv, wo)]
        else:
            heads = [
                PrunedHead(wq=a, wk=b, wv_hat=c, wo_hat=d, k_qk=k_qk, k_vo=k_vo)
                for a, b, c, d in zip(wq, wk, wv, wo)
            ]
        wu = tensors.get(f"{p}.ffn.wu")
        wd = tensors.get(f"{p}.ffn.wd")
        if wu is None or wd is None:
            raise CheckpointShapeError(f"{p}: missing FFN tensors")
        wg = tensors.get(f"{p}.ffn.wg")
        if cfg.gated and wg is None:
            raise CheckpointShapeError(f"{p}: config says gated but {p}.ffn.wg is missing")
        if not cfg.gated and wg is not None:
            raise CheckpointShapeError(f"{p}: config says ungated but {p}.ffn.wg exists")
        if wu.shape[0] != cfg.d or wu.shape[1] > cfg.ffn_width:
            raise CheckpointShapeError(
                f"{p}.ffn.wu: shape {wu.shape} inconsistent with d={cfg.d}, "
                f"ffn_width={cfg.ffn_width}"
            )
        try:
            ffn = FfnWeights(wu=wu, wd=wd, wg=wg)
        except ValueError as exc:
            raise CheckpointShapeError(f"{p}: {exc}") from exc
        adapter = None
        a1 = tensors.get(f"{p}.ffn.adapter.w1")
        a2 = tensors.get(f"{p}.ffn.adapter.w2")
        if (a1 is None) != (a2 is None):
            raise CheckpointShapeError(f"{p}: adapter must have both w1 and w2")
        if a1 is not None:
            if a1.shape != a2.shape or a1.shape[0] != cfg.d:
                raise CheckpointShapeError(
                    f"{p}: adapter factors {a1.shape} x {a2.shape} must both be d x r"
                )
            meta = per_layer_meta[l] if l < len(per_layer_meta) else {}
            adapter = LowRankAdapter(
                w1=a1,
                w2=a2,
                layer_index=l,
                lambda_used=float(meta.get("lambda", 0.0)),
                mc2=float(meta.get("mc2_fit", 0.0)),
            )
        blocks.append(
            TransformerBlock(
                attn_norm=need(f"{p}.attn.norm", (cfg.d,)),
                heads=heads,
                ffn_norm=need(f"{p}.ffn.norm", (cfg.d,)),
                ffn=ffn,
                adapter=adapter,
            )
        )
    return Transformer(
        config=cfg,
        embed=need("embed.tok", (cfg.vocab_size, cfg.d)),
        blocks=blocks,
        final_norm=need("final.norm", (cfg.d,)),
        final_proj=need("final.proj", (cfg.d, cfg.vocab_size)),
    )


def bundled_path(name: str) -> Path:
    """Path to a file shipped in the package's data directory."""
    return Path(__file__).resolve().parent / "data" / name
