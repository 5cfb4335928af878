"""Command-line interface: ``olica prune | eval | inspect``.

Exit codes: 0 success, 2 config or budget error, 3 numerical failure,
4 I/O or checkpoint format error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .checkpoint import (
    MODES,
    PROPAGATE_CHOICES,
    PruneConfig,
    bundled_path,
    load_checkpoint,
    save_checkpoint,
)
from .errors import BudgetError, CheckpointError, ConfigError, DecompositionError
from .model import load_corpus
from .pipeline import eval_model, inspect_checkpoint, prune_model

BUNDLED_MODEL = "toy_trained.olica"
BUNDLED_TRAIN = "train.txt"
BUNDLED_HELDOUT = "heldout.txt"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="olica",
        description="Retraining-free structured pruning of transformer checkpoints",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prune", help="prune a checkpoint and write the result")
    p.add_argument("--model", required=True, help="input checkpoint path")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--config", help="JSON file with PruneConfig fields (flags win)")
    p.add_argument("--sparsity", type=float, help="whole-model sparsity target in [0, 1)")
    p.add_argument("--mode", choices=MODES, help="value/output compression mode")
    p.add_argument("--lambda0", type=float, help="ridge strength multiplier")
    p.add_argument("--rank-ratio", type=float, dest="rank_ratio", help="adapter rank / d")
    p.add_argument(
        "--calib-layers", type=int, dest="calib_layers", help="number of FFN layers to calibrate"
    )
    p.add_argument("--calib", help="calibration corpus (default: bundled training text)")
    p.add_argument("--n-samples", type=int, dest="n_samples", help="calibration sequences")
    p.add_argument("--seq-len", type=int, dest="seq_len", help="calibration sequence length")
    p.add_argument("--propagate", choices=PROPAGATE_CHOICES, help="block output propagation")
    p.add_argument("--seed", type=int, help="sampler seed")
    p.add_argument("--report", help="write the full prune report as JSON here")

    p = sub.add_parser("eval", help="perplexity of a checkpoint on a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", help="UTF-8 text file (default: bundled held-out text)")
    p.add_argument("--seq-len", type=int, dest="seq_len", default=128)

    p = sub.add_parser("inspect", help="structure/budget report without inference")
    p.add_argument("--model", required=True)
    return parser


_FLAG_FIELDS = (
    "sparsity",
    "mode",
    "lambda0",
    "rank_ratio",
    "calib_layers",
    "n_samples",
    "seq_len",
    "propagate",
    "seed",
)


def _prune_config(args: argparse.Namespace) -> PruneConfig:
    overrides = {name: getattr(args, name) for name in _FLAG_FIELDS}
    if args.config:
        cfg = PruneConfig.from_json(args.config, overrides)
    else:
        if overrides["sparsity"] is None:
            raise ConfigError("--sparsity is required unless --config provides it")
        cfg = PruneConfig(**{k: v for k, v in overrides.items() if v is not None})
    if args.calib:
        cfg.calib_path = args.calib
    return cfg


def _cmd_prune(args: argparse.Namespace) -> int:
    config = _prune_config(args)
    model = load_checkpoint(args.model)
    calib = load_corpus(config.calib_path or bundled_path(BUNDLED_TRAIN))
    eval_tokens = load_corpus(bundled_path(BUNDLED_HELDOUT))
    pruned, report = prune_model(model, config, calib, eval_tokens=eval_tokens)
    save_checkpoint(pruned, args.out, pruning_meta=report.pruning_meta())
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report.to_dict(), f, indent=2)
    print(
        json.dumps(
            {
                "out": args.out,
                "sparsity_requested": report.sparsity_requested,
                "sparsity_achieved": report.sparsity_achieved,
                "params_before": report.params_before,
                "params_after": report.params_after,
                "ppl_before": report.ppl_before,
                "ppl_after": report.ppl_after,
                "calibrated_layers": [r.layer for r in report.layers if r.calibrated],
                "report": args.report,
            },
            indent=2,
        )
    )
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.model)
    tokens = load_corpus(args.corpus or bundled_path(BUNDLED_HELDOUT))
    result = eval_model(model, tokens, args.seq_len)
    print(
        json.dumps(
            {
                "perplexity": result.perplexity,
                "seconds": result.seconds,
                "n_tokens": result.n_tokens,
                "seq_len": result.seq_len,
            },
            indent=2,
        )
    )
    return 0


def _cmd_inspect(args: argparse.Namespace) -> int:
    print(json.dumps(inspect_checkpoint(args.model), indent=2))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "prune":
            return _cmd_prune(args)
        if args.command == "eval":
            return _cmd_eval(args)
        return _cmd_inspect(args)
    except (ConfigError, BudgetError) as exc:
        print(f"olica: configuration error: {exc}", file=sys.stderr)
        return 2
    except DecompositionError as exc:
        print(f"olica: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (CheckpointError, OSError) as exc:
        print(f"olica: i/o error: {exc}", file=sys.stderr)
        return 4


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
