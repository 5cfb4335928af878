"""Retraining-free structured pruning of small transformer checkpoints.

Attention layers are compressed by orthogonal decomposition of the per-head
weight products, feed-forward layers by magnitude-times-activation neuron
pruning followed by a closed-form low-rank ridge calibration of the
residual error.
"""

from .allocate import Budget, LayerBudget, allocate
from .attention import HeadWeights, LowRankPair, PrunedHead, factor_qk, fast_ond, ond, prune_head_vo
from .calibrate import (
    LowRankAdapter,
    ResidualPair,
    fit_adapter,
    lambda_rule,
    mc2,
    residual,
    select_layers,
)
from .checkpoint import PruneConfig, load_checkpoint, read_manifest, save_checkpoint
from .errors import (
    BudgetError,
    CheckpointError,
    ConfigError,
    DecompositionError,
    OlicaError,
    SingularityError,
)
from .ffn import FfnWeights, prune_ffn
from .importance import ImportanceVector, neuron_scores, select_kept, wanda_scores
from .linalg import SvdResult, column_norms, ridge_solve, svd, truncated_factor, weighted_factor
from .model import (
    ActivationTrace,
    ModelConfig,
    Transformer,
    TransformerBlock,
    forward,
    load_corpus,
    model_param_count,
    perplexity,
    random_model,
    tokenize,
)
from .pipeline import EvalResult, PruneReport, eval_model, inspect_checkpoint, prune_model

__version__ = "0.1.0"
