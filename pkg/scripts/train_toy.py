#!/usr/bin/env python3
"""Train the bundled toy checkpoint with plain numpy backprop.

The parameter layout, norm placement, rotary convention, and gated-silu FFN
match the package's forward exactly (asserted before saving), so the saved
checkpoint evaluates identically under olica.model.forward. Run once; the
resulting src/olica/data/toy_trained.olica is committed.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from olica.attention import HeadWeights  # noqa: E402
from olica.checkpoint import save_checkpoint  # noqa: E402
from olica.ffn import FfnWeights  # noqa: E402
from olica.model import (  # noqa: E402
    RMS_EPS,
    ROPE_BASE,
    ModelConfig,
    Transformer,
    TransformerBlock,
    forward as pkg_forward,
    load_corpus,
    perplexity,
)


def init_params(cfg: ModelConfig, seed: int) -> dict:
    rng = np.random.default_rng(seed)

    def mat(r, c, scale=0.02):
        return rng.normal(0.0, scale, size=(r, c))

    p = {"embed.tok": mat(cfg.vocab_size, cfg.d), "final.norm": np.ones(cfg.d)}
    p["final.proj"] = mat(cfg.d, cfg.vocab_size)
    for l in range(cfg.n_blocks):
        b = f"blocks.{l}"
        p[f"{b}.attn.norm"] = np.ones(cfg.d)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{b}.attn.{name}"] = mat(cfg.d, cfg.d)
        p[f"{b}.ffn.norm"] = np.ones(cfg.d)
        for name in ("wu", "wg", "wd"):
            p[f"{b}.ffn.{name}"] = mat(cfg.d, cfg.ffn_width)
    return p


def rope_tables(cfg: ModelConfig, L: int):
    inv = ROPE_BASE ** (-np.arange(0, cfg.d_h, 2) / cfg.d_h)
    ang = np.arange(L)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def rope_apply(x, cos, sin, sign=1.0):
    # x: (..., L, d_h); sign=-1 rotates backward (the transpose), used in backprop
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - sign * odd * sin
    out[..., 1::2] = sign * even * sin + odd * cos
    return out


def rmsnorm_fwd(x, g):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x * r * g, r


def rmsnorm_bwd(x, g, r, dy):
    t = np.sum(dy * g * x, axis=-1, keepdims=True)
    dx = dy * g * r - x * (r**3) * t / x.shape[-1]
    dg = np.sum(dy * x * r, axis=tuple(range(x.ndim - 1)))
    return dx, dg


def sigmoid(x):
    # clip keeps exp in range; activations here never get near +-60 anyway
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def forward_backward(params, cfg: ModelConfig, ids, targets, want_grads=True):
    """Mean cross-entropy over the batch and, optionally, all gradients."""
    B, L = ids.shape
    h, dh, d = cfg.h, cfg.d_h, cfg.d
    cos, sin = rope_tables(cfg, L)
    mask = np.triu(np.ones((L, L), dtype=bool), k=1)
    scale = 1.0 / np.sqrt(dh)

    x = params["embed.tok"][ids]  # (B,L,d)
    cache = []
    for l in range(cfg.n_blocks):
        b = f"blocks.{l}"
        a, r1 = rmsnorm_fwd(x, params[f"{b}.attn.norm"])
        q = (a @ params[f"{b}.attn.wq"]).reshape(B, L, h, dh).transpose(0, 2, 1, 3)
        k = (a @ params[f"{b}.attn.wk"]).reshape(B, L, h, dh).transpose(0, 2, 1, 3)
        v = (a @ params[f"{b}.attn.wv"]).reshape(B, L, h, dh).transpose(0, 2, 1, 3)
        qr, kr = rope_apply(q, cos, sin), rope_apply(k, cos, sin)
        s = (qr @ kr.transpose(0, 1, 3, 2)) * scale
        s = np.where(mask, -np.inf, s)
        s -= s.max(axis=-1, keepdims=True)
        es = np.exp(s)
        p = es / es.sum(axis=-1, keepdims=True)
        c = (p @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
        att = c @ params[f"{b}.attn.wo"].T
        x1 = x + att
        u_in, r2 = rmsnorm_fwd(x1, params[f"{b}.ffn.norm"])
        up = u_in @ params[f"{b}.ffn.wu"]
        gt = u_in @ params[f"{b}.ffn.wg"]
        sg = sigmoid(gt)
        inter = up * (gt * sg)
        f = inter @ params[f"{b}.ffn.wd"].T
        x2 = x1 + f
        cache.append((x, a, r1, qr, kr, v, p, c, x1, u_in, r2, up, gt, sg, inter))
        x = x2

    z, rf = rmsnorm_fwd(x, params["final.norm"])
    logits = z @ params["final.proj"]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) - np.take_along_axis(
        shifted, targets[..., None], axis=-1
    ).squeeze(-1)
    loss = float(lse.mean())
    if not want_grads:
        return loss, None

    grads = {}
    n_pred = B * L
    probs = np.exp(shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True)))
    dlogits = probs
    np.add.at(dlogits.reshape(-1, cfg.vocab_size), (np.arange(n_pred), targets.ravel()), -1.0)
    dlogits /= n_pred
    grads["final.proj"] = z.reshape(-1, d).T @ dlogits.reshape(-1, cfg.vocab_size)
    dz = dlogits @ params["final.proj"].T
    dx, grads["final.norm"] = rmsnorm_bwd(x, params["final.norm"], rf, dz)

    for l in reversed(range(cfg.n_blocks)):
        b = f"blocks.{l}"
        x0, a, r1, qr, kr, v, p, c, x1, u_in, r2, up, gt, sg, inter = cache[l]
        # FFN
        df = dx
        grads[f"{b}.ffn.wd"] = df.reshape(-1, d).T @ inter.reshape(-1, cfg.ffn_width)
        dinter = df @ params[f"{b}.ffn.wd"]
        dup = dinter * (gt * sg)
        dgt = dinter * up * (sg * (1.0 + gt * (1.0 - sg)))
        grads[f"{b}.ffn.wu"] = u_in.reshape(-1, d).T @ dup.reshape(-1, cfg.ffn_width)
        grads[f"{b}.ffn.wg"] = u_in.reshape(-1, d).T @ dgt.reshape(-1, cfg.ffn_width)
        du_in = dup @ params[f"{b}.ffn.wu"].T + dgt @ params[f"{b}.ffn.wg"].T
        dx1, grads[f"{b}.ffn.norm"] = rmsnorm_bwd(x1, params[f"{b}.ffn.norm"], r2, du_in)
        dx1 += dx
        # attention
        datt = dx1
        grads[f"{b}.attn.wo"] = datt.reshape(-1, d).T @ c.reshape(-1, d)
        dc = (datt @ params[f"{b}.attn.wo"]).reshape(B, L, h, dh).transpose(0, 2, 1, 3)
        dp = dc @ v.transpose(0, 1, 3, 2)
        dv = p.transpose(0, 1, 3, 2) @ dc
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
        dqr = (ds @ kr) * scale
        dkr = (ds.transpose(0, 1, 3, 2) @ qr) * scale
        dq = rope_apply(dqr, cos, sin, sign=-1.0)
        dk = rope_apply(dkr, cos, sin, sign=-1.0)
        dq = dq.transpose(0, 2, 1, 3).reshape(B, L, d)
        dk = dk.transpose(0, 2, 1, 3).reshape(B, L, d)
        dv = dv.transpose(0, 2, 1, 3).reshape(B, L, d)
        af = a.reshape(-1, d)
        grads[f"{b}.attn.wq"] = af.T @ dq.reshape(-1, d)
        grads[f"{b}.attn.wk"] = af.T @ dk.reshape(-1, d)
        grads[f"{b}.attn.wv"] = af.T @ dv.reshape(-1, d)
        da = (
            dq @ params[f"{b}.attn.wq"].T
            + dk @ params[f"{b}.attn.wk"].T
            + dv @ params[f"{b}.attn.wv"].T
        )
        dx0, grads[f"{b}.attn.norm"] = rmsnorm_bwd(x0, params[f"{b}.attn.norm"], r1, da)
        dx = dx0 + dx1

    dE = np.zeros_like(params["embed.tok"])
    np.add.at(dE, ids.reshape(-1), dx.reshape(-1, d))
    grads["embed.tok"] = dE
    return loss, grads


def grad_check(seed=0):
    """Directional-derivative check per tensor; aggregating over a random
    direction keeps the quotient well above float64 rounding noise."""
    cfg = ModelConfig(n_blocks=2, d=8, h=2, ffn_width=16, vocab_size=11, rope=True, max_seq_len=16)
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, cfg.vocab_size, size=(3, 6))
    tgt = rng.integers(0, cfg.vocab_size, size=(3, 6))
    _, grads = forward_backward(params, cfg, ids, tgt)
    eps = 1e-5
    worst = 0.0
    for name, p in params.items():
        u = rng.normal(size=p.shape)
        u /= np.sqrt(np.sum(u * u))
        p += eps * u
        lp, _ = forward_backward(params, cfg, ids, tgt, want_grads=False)
        p -= 2 * eps * u
        lm, _ = forward_backward(params, cfg, ids, tgt, want_grads=False)
        p += eps * u
        num = (lp - lm) / (2 * eps)
        ana = float(np.sum(grads[name] * u))
        err = abs(num - ana) / max(1e-10, abs(num) + abs(ana))
        print(f"  {name:24s} analytic {ana:+.8e}  numeric {num:+.8e}  rel {err:.2e}")
        worst = max(worst, err)
    print(f"grad check worst relative error: {worst:.2e}")
    assert worst < 1e-5, "analytic gradients disagree with finite differences"


def to_transformer(params, cfg: ModelConfig) -> Transformer:
    dh = cfg.d_h
    blocks = []
    for l in range(cfg.n_blocks):
        b = f"blocks.{l}"
        heads = [
            HeadWeights(
                wq=params[f"{b}.attn.wq"][:, i * dh : (i + 1) * dh].copy(),
                wk=params[f"{b}.attn.wk"][:, i * dh : (i + 1) * dh].copy(),
                wv=params[f"{b}.attn.wv"][:, i * dh : (i + 1) * dh].copy(),
                wo=params[f"{b}.attn.wo"][:, i * dh : (i + 1) * dh].copy(),
            )
            for i in range(cfg.h)
        ]
        blocks.append(
            TransformerBlock(
                attn_norm=params[f"{b}.attn.norm"].copy(),
                heads=heads,
                ffn_norm=params[f"{b}.ffn.norm"].copy(),
                ffn=FfnWeights(
                    wu=params[f"{b}.ffn.wu"].copy(),
                    wd=params[f"{b}.ffn.wd"].copy(),
                    wg=params[f"{b}.ffn.wg"].copy(),
                ),
            )
        )
    return Transformer(
        config=cfg,
        embed=params["embed.tok"].copy(),
        blocks=blocks,
        final_norm=params["final.norm"].copy(),
        final_proj=params["final.proj"].copy(),
    )


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=2400)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--seq-len", type=int, default=128)
    ap.add_argument("--lr", type=float, default=3e-4)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--grad-check", action="store_true")
    ap.add_argument("--out", default=str(ROOT / "src/olica/data/toy_trained.olica"))
    args = ap.parse_args()

    if args.grad_check:
        grad_check()
        return

    cfg = ModelConfig(
        n_blocks=4, d=64, h=4, ffn_width=256, vocab_size=256,
        activation="silu", gated=True, rope=True, max_seq_len=256,
    )
    train = load_corpus(ROOT / "src/olica/data/train.txt")
    heldout = load_corpus(ROOT / "src/olica/data/heldout.txt")
    params = init_params(cfg, args.seed)
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(args.seed)
    b1, b2, eps = 0.9, 0.95, 1e-8
    warmup = 100
    t_start = time.time()
    for step in range(1, args.steps + 1):
        starts = rng.integers(0, train.size - args.seq_len - 1, size=args.batch)
        ids = np.stack([train[s : s + args.seq_len] for s in starts])
        tgt = np.stack([train[s + 1 : s + args.seq_len + 1] for s in starts])
        loss, grads = forward_backward(params, cfg, ids, tgt)
        gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        clip = min(1.0, 1.0 / (gnorm + 1e-12))
        if step <= warmup:
            lr = args.lr * step / warmup
        else:
            prog = (step - warmup) / max(1, args.steps - warmup)
            lr = args.lr * (0.1 + 0.9 * 0.5 * (1 + np.cos(np.pi * prog)))
        for k, g in grads.items():
            g = g * clip
            m1[k] = b1 * m1[k] + (1 - b1) * g
            m2[k] = b2 * m2[k] + (1 - b2) * g * g
            mh = m1[k] / (1 - b1**step)
            vh = m2[k] / (1 - b2**step)
            params[k] -= lr * mh / (np.sqrt(vh) + eps)
        if step % 200 == 0 or step == 1:
            print(f"step {step:5d}  loss {loss:.4f}  lr {lr:.2e}  ({time.time()-t_start:.0f}s)")

    model = to_transformer(params, cfg)
    # The training forward must agree with the package forward before we ship:
    # compare the mean NLL both paths assign to the same window.
    ids = train[: args.seq_len]
    tgt = train[1 : args.seq_len + 1]
    train_loss, _ = forward_backward(params, cfg, ids[None, :], tgt[None, :], want_grads=False)
    logits = pkg_forward(model, ids)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    pkg_loss = float(-logp[np.arange(args.seq_len), tgt].mean())
    drift = abs(train_loss - pkg_loss)
    print(f"forward consistency: trainer {train_loss:.10f} vs package {pkg_loss:.10f}")
    assert drift < 1e-9, f"trainer and package forwards disagree by {drift:.2e}"
    train_ppl = perplexity(model, train[:20000], args.seq_len)
    held_ppl = perplexity(model, heldout, args.seq_len)
    print(f"package-eval train PPL {train_ppl:.3f}  heldout PPL {held_ppl:.3f}")
    save_checkpoint(model, args.out)
    print("saved", args.out)


if __name__ == "__main__":
    main()
