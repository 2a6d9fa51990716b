"""Nested-truncation contrastive objective over two dropout views.

Each sentence is encoded twice with independent dropout; the two pooled
embeddings form a positive pair and the rest of the batch supplies
negatives. The InfoNCE term is averaged over a nested ladder of prefix
truncations so every prefix width learns to be a usable embedding.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ContractError, InvalidDimensionError
from .tensor_core import EpsilonPolicy, row_normalize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.05
    dims: tuple[int, ...] = (4, 8, 16, 32)
    eps: EpsilonPolicy = field(default_factory=EpsilonPolicy)

    def __post_init__(self):
        if not self.temperature > 0.0:
            raise ContractError(f"temperature must be > 0, got {self.temperature}")
        if len(self.dims) == 0:
            raise ContractError("dims must be non-empty")
        if any(d <= 0 for d in self.dims) or list(self.dims) != sorted(set(self.dims)):
            raise ContractError(f"dims must be strictly increasing positives, got {self.dims}")


@dataclass
class ViewPair:
    """Pooled embeddings of the same sentences under two dropout draws."""

    z_a: ag.Tensor
    z_b: ag.Tensor

    def __post_init__(self):
        if self.z_a.shape != self.z_b.shape or self.z_a.ndim != 2:
            raise ContractError(
                f"view shapes must match and be 2-d, got {self.z_a.shape} and {self.z_b.shape}"
            )


def truncate(z: ag.Tensor, m: int) -> ag.Tensor:
    """Keep the first m dims of each row. Requires 0 < m <= dims."""
    d_full = z.shape[-1]
    if not 0 < m <= d_full:
        raise InvalidDimensionError(f"truncation to m={m} invalid for d_full={d_full}")
    return z[:, :m] if m < d_full else z


def info_nce(
    z_a: ag.Tensor,
    z_b: ag.Tensor,
    temperature: float,
    eps: EpsilonPolicy | None = None,
) -> ag.Tensor:
    """One-directional InfoNCE with cosine similarity.

    Row i of the a-view is pulled toward row i of the b-view against all
    other b rows. With a single row there are no negatives and the loss
    is exactly zero.
    """
    eps = eps or EpsilonPolicy()
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise ContractError(f"view shapes must match and be 2-d, got {z_a.shape} and {z_b.shape}")
    a_hat, a_flags = row_normalize(z_a, eps, return_flags=True)
    b_hat, b_flags = row_normalize(z_b, eps, return_flags=True)
    if a_flags.any() or b_flags.any():
        log.warning("info_nce: %d near-zero-norm rows floored", int(a_flags.sum() + b_flags.sum()))
    logits = (a_hat @ b_hat.T) * (1.0 / temperature)
    shift = ag.constant(logits.data.max(axis=1, keepdims=True))
    lse = ag.log(ag.exp(logits - shift).sum(axis=1, keepdims=True)) + shift
    eye = ag.constant(np.eye(z_a.shape[0], dtype=z_a.dtype))
    positives = (logits * eye).sum(axis=1, keepdims=True)
    return (lse - positives).mean()


def mrl_loss(pair: ViewPair, cfg: ContrastiveConfig) -> tuple[ag.Tensor, dict[int, float]]:
    """InfoNCE averaged over the truncation ladder.

    Returns the scalar loss and the per-width values that went into it.
    """
    d_full = pair.z_a.shape[-1]
    if cfg.dims[-1] > d_full:
        raise InvalidDimensionError(f"dims {cfg.dims} exceed embedding width {d_full}")
    per_dim: dict[int, float] = {}
    total = None
    for m in cfg.dims:
        term = info_nce(truncate(pair.z_a, m), truncate(pair.z_b, m), cfg.temperature, cfg.eps)
        per_dim[m] = float(term.data)
        total = term if total is None else total + term
    loss = total * (1.0 / len(cfg.dims))
    return loss, per_dim
