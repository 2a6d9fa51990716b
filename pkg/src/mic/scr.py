"""Soft collapse regularizer: decorrelate residual dims from the prefix.

Works on token-level hidden states. The prefix (first d dims) and the
residual (remaining dims) are standardized per sequence over active
tokens, their cross-correlation matrix is averaged over the batch, and
entries are penalized only beyond a deadzone of width tau_corr. A hinge
on the mean per-dimension std discourages the degenerate solution of
shrinking activations to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import autograd as ag
from .errors import ContractError
from .tensor_core import (
    EpsilonPolicy,
    SequenceMask,
    masked_moments,
    masked_standardize,
    split_prefix_residual,
)


@dataclass(frozen=True)
class ScrConfig:
    tau_corr: float = 0.1
    lambda_var: float = 0.1
    eps: EpsilonPolicy = field(default_factory=EpsilonPolicy)

    def __post_init__(self):
        if not 0.0 <= self.tau_corr <= 1.0:
            raise ContractError(f"tau_corr must lie in [0, 1], got {self.tau_corr}")
        if self.lambda_var < 0.0:
            raise ContractError(f"lambda_var must be >= 0, got {self.lambda_var}")


@dataclass
class CrossCorrelation:
    """Batch-averaged prefix/residual cross-correlation, (d, d_res)."""

    c: ag.Tensor
    d: int
    d_res: int


@dataclass(frozen=True)
class ScrTerms:
    """Scalar summary of one soft-collapse evaluation."""

    l_corr: float
    l_var: float
    l_scr: float


def cross_correlation(h: ag.Tensor, mask: SequenceMask, d: int, cfg: ScrConfig) -> CrossCorrelation:
    """Cross-correlation between standardized prefix and residual tokens.

    C = (1/B) sum_i (1/N_i) sum_l x_pre[i,l] x_res[i,l]^T with both parts
    standardized per sequence. Entries land in roughly [-1, 1]; a residual
    that copies the prefix puts +1 on the diagonal.
    """
    pre, res = split_prefix_residual(h, d)
    xp = masked_standardize(pre, mask, cfg.eps)
    xr = masked_standardize(res, mask, cfg.eps)
    b = mask.batch
    weights = ag.constant((1.0 / (b * mask.active_counts))[:, None, None].astype(h.dtype))
    per_seq = xp.swapaxes(1, 2) @ xr
    c = (per_seq * weights).sum(axis=0)
    return CrossCorrelation(c=c, d=d, d_res=h.shape[-1] - d)


def corr_penalty(corr: CrossCorrelation, cfg: ScrConfig) -> ag.Tensor:
    """Mean squared excess of |C| beyond the tau_corr deadzone."""
    excess = ag.relu(ag.abs_(corr.c) - cfg.tau_corr)
    return (excess * excess).sum() * (1.0 / (corr.d * corr.d_res))


def variance_floor(h: ag.Tensor, mask: SequenceMask, d: int) -> ag.Tensor:
    """Hinge pushing mean per-dimension std of both parts up toward 1.

    Uses raw (unstandardized) per-sequence stds; the residual hinge is
    half-weighted. Zero once both parts average std >= 1.
    """
    pre, res = split_prefix_residual(h, d)
    _, var_pre = masked_moments(pre, mask)
    _, var_res = masked_moments(res, mask)
    sbar_pre = ag.sqrt(var_pre).mean()
    sbar_res = ag.sqrt(var_res).mean()
    return ag.relu(1.0 - sbar_pre) + 0.5 * ag.relu(1.0 - sbar_res)


def scr_loss(h: ag.Tensor, mask: SequenceMask, d: int, cfg: ScrConfig) -> tuple[ag.Tensor, ScrTerms]:
    """Full soft-collapse loss at one (layer, prefix width) site."""
    l_corr = corr_penalty(cross_correlation(h, mask, d, cfg), cfg)
    l_var = variance_floor(h, mask, d)
    loss = l_corr + cfg.lambda_var * l_var
    terms = ScrTerms(l_corr=float(l_corr.data), l_var=float(l_var.data), l_scr=float(loss.data))
    return loss, terms
