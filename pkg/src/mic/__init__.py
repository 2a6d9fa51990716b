"""Matryoshka contrastive embeddings with collapse and isotropy regularizers.

The package is a desk-scale reference implementation: a numpy autograd
with certified gradients, a toy transformer encoder, the three training
losses, and the surrounding trainer, diagnostics, eval, and CLI plumbing.
"""

__version__ = "0.1.0"

from .autograd import Tensor, backward, finite_diff_check, no_grad
from .contrastive import ContrastiveConfig, ViewPair, info_nce, mrl_loss, truncate
from .encoder import EncoderConfig, ForwardTrace, LayerSelection, TinyEncoder
from .errors import MicError
from .scr import CrossCorrelation, ScrConfig, corr_penalty, cross_correlation, scr_loss, variance_floor
from .sir import SirConfig, cv_loss, dim_variances, sir_loss, uniformity_loss
from .tensor_core import (
    EpsilonPolicy,
    SequenceMask,
    masked_mean_pool,
    masked_moments,
    masked_standardize,
    row_normalize,
    split_prefix_residual,
)
from .trainer import LossBreakdown, TrainConfig, Trainer, align_loss, preset_config

__all__ = [
    "Tensor",
    "backward",
    "finite_diff_check",
    "no_grad",
    "ContrastiveConfig",
    "ViewPair",
    "info_nce",
    "mrl_loss",
    "truncate",
    "EncoderConfig",
    "ForwardTrace",
    "LayerSelection",
    "TinyEncoder",
    "MicError",
    "CrossCorrelation",
    "ScrConfig",
    "corr_penalty",
    "cross_correlation",
    "scr_loss",
    "variance_floor",
    "SirConfig",
    "cv_loss",
    "dim_variances",
    "sir_loss",
    "uniformity_loss",
    "EpsilonPolicy",
    "SequenceMask",
    "masked_mean_pool",
    "masked_moments",
    "masked_standardize",
    "row_normalize",
    "split_prefix_residual",
    "LossBreakdown",
    "TrainConfig",
    "Trainer",
    "align_loss",
    "preset_config",
]
