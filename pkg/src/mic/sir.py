"""Spectral isotropy regularizer on pooled prefix embeddings.

Two pieces, averaged: the coefficient of variation of per-dimension
batch variances (flat variance spectrum when zero), and a log-mean
Gaussian potential between normalized rows on the hypersphere (lower
when points spread apart). Both need at least two rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ContractError, InsufficientBatchError
from .tensor_core import EpsilonPolicy, row_normalize


@dataclass(frozen=True)
class SirConfig:
    kernel_t: float = 2.0
    eps: EpsilonPolicy = field(default_factory=EpsilonPolicy)

    def __post_init__(self):
        if not self.kernel_t > 0.0:
            raise ContractError(f"kernel_t must be > 0, got {self.kernel_t}")


@dataclass(frozen=True)
class SirTerms:
    l_cv: float
    l_unif: float
    l_sir: float


def _require_batch(z: ag.Tensor, op: str) -> None:
    if not isinstance(z, ag.Tensor) or z.ndim != 2:
        raise ContractError(f"{op} expects a (batch, dims) tensor")
    if z.shape[0] < 2:
        raise InsufficientBatchError(f"{op} needs a batch of at least 2, got {z.shape[0]}")


def dim_variances(z: ag.Tensor) -> ag.Tensor:
    """Population variance of each dimension over the batch, (dims,)."""
    _require_batch(z, "dim_variances")
    mu = z.mean(axis=0)
    diff = z - mu
    return (diff * diff).mean(axis=0)


def cv_loss(z: ag.Tensor, eps: EpsilonPolicy) -> ag.Tensor:
    """Coefficient of variation of the variance spectrum.

    std(v) / (mean(v) + eps) with population statistics throughout.
    Exactly zero for a flat spectrum, including the all-zero one.
    """
    v = dim_variances(z)
    vbar = v.mean()
    spread = ag.sqrt(((v - vbar) * (v - vbar)).mean())
    return spread / (vbar + eps.eps)


def uniformity_loss(z_hat: ag.Tensor, cfg: SirConfig) -> ag.Tensor:
    """Log mean RBF potential between distinct unit rows.

    K_ij = exp(-2 t (1 - cos_ij)); diagonal excluded. Minimized when
    points repel to cover the sphere. Caller provides unit rows.
    """
    _require_batch(z_hat, "uniformity_loss")
    b = z_hat.shape[0]
    sims = z_hat @ z_hat.T
    kernel = ag.exp((sims - 1.0) * (2.0 * cfg.kernel_t))
    off_diag = ag.constant(1.0 - np.eye(b, dtype=z_hat.dtype))
    mean_off = (kernel * off_diag).sum() * (1.0 / (b * (b - 1)))
    return ag.log(mean_off + cfg.eps.eps)


def sir_loss(z: ag.Tensor, cfg: SirConfig) -> tuple[ag.Tensor, SirTerms]:
    """Isotropy loss on pooled embeddings: 0.5 * (cv + uniformity)."""
    l_cv = cv_loss(z, cfg.eps)
    z_hat = row_normalize(z, cfg.eps)
    l_unif = uniformity_loss(z_hat, cfg)
    loss = (l_cv + l_unif) * 0.5
    terms = SirTerms(l_cv=float(l_cv.data), l_unif=float(l_unif.data), l_sir=float(loss.data))
    return loss, terms
