"""Masked tensor statistics and truncation primitives shared by every loss.

Hidden states are (batch, tokens, dims) tensors accompanied by a binary
SequenceMask. All statistics here are masked: padding tokens contribute
nothing, and a sequence with zero active tokens is a hard error rather
than a silent NaN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import (
    ContractError,
    DegenerateSequenceError,
    InvalidDimensionError,
    NonFiniteError,
)


@dataclass(frozen=True)
class EpsilonPolicy:
    """Single numerical-slack knob threaded through every loss."""

    eps: float = 1e-5

    def __post_init__(self):
        if not (self.eps > 0.0 and np.isfinite(self.eps)):
            raise ContractError(f"eps must be a positive finite float, got {self.eps!r}")


class SequenceMask:
    """Binary (batch, tokens) mask with cached per-sequence active counts."""

    def __init__(self, flags):
        arr = np.asarray(flags, dtype=np.float64)
        if arr.ndim != 2:
            raise ContractError(f"mask must be 2-d, got shape {arr.shape}")
        if not np.isin(arr, (0.0, 1.0)).all():
            raise ContractError("mask entries must be exactly 0 or 1")
        self.flags = arr
        self.active_counts = arr.sum(axis=1)

    @property
    def batch(self) -> int:
        return self.flags.shape[0]

    @property
    def tokens(self) -> int:
        return self.flags.shape[1]

    def require_active(self) -> None:
        if (self.active_counts == 0).any():
            idx = int(np.argmin(self.active_counts))
            raise DegenerateSequenceError(f"sequence {idx} has zero active tokens")

    def flags3(self, dtype) -> ag.Tensor:
        return ag.constant(self.flags[:, :, None].astype(dtype, copy=False))

    def counts_col(self, dtype) -> np.ndarray:
        return self.active_counts[:, None].astype(dtype, copy=False)

    def __repr__(self) -> str:
        return f"SequenceMask(batch={self.batch}, tokens={self.tokens})"


def _check_tensor3(h: ag.Tensor, mask: SequenceMask, op: str) -> None:
    if not isinstance(h, ag.Tensor) or h.ndim != 3:
        raise ContractError(f"{op} expects a (batch, tokens, dims) tensor")
    if h.shape[:2] != (mask.batch, mask.tokens):
        raise ContractError(
            f"{op}: tensor shape {h.shape} does not match mask ({mask.batch}, {mask.tokens})"
        )


def _check_finite(t: ag.Tensor, op: str) -> ag.Tensor:
    if not np.isfinite(t.data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return t


def split_prefix_residual(h: ag.Tensor, d: int) -> tuple[ag.Tensor, ag.Tensor]:
    """Split the feature axis into the first d dims and the remainder.

    Requires 0 < d < d_full so both parts are non-empty.
    """
    d_full = h.shape[-1]
    if not 0 < d < d_full:
        raise InvalidDimensionError(f"split at d={d} invalid for d_full={d_full}")
    return h[..., :d], h[..., d:]


def masked_moments(h: ag.Tensor, mask: SequenceMask) -> tuple[ag.Tensor, ag.Tensor]:
    """Per-sequence mean and population variance over active tokens.

    Returns (mu, var), each (batch, dims). Masked tokens contribute
    nothing; a sequence with no active tokens raises.
    """
    _check_tensor3(h, mask, "masked_moments")
    mask.require_active()
    b, _, dims = h.shape
    flags3 = mask.flags3(h.dtype)
    counts = mask.counts_col(h.dtype)
    mu = (h * flags3).sum(axis=1) / counts
    diff = h - mu.reshape((b, 1, dims))
    var = (diff * diff * flags3).sum(axis=1) / counts
    return _check_finite(mu, "masked_moments"), _check_finite(var, "masked_moments")


def masked_standardize(h: ag.Tensor, mask: SequenceMask, eps: EpsilonPolicy) -> ag.Tensor:
    """Standardize each sequence per dimension over its active tokens.

    Output rows at masked positions are exactly zero. The std in the
    denominator is softened by eps, so constant dimensions map to zero
    rather than NaN.
    """
    mu, var = masked_moments(h, mask)
    b, _, dims = h.shape
    sigma = ag.sqrt(var).reshape((b, 1, dims))
    flags3 = mask.flags3(h.dtype)
    out = flags3 * (h - mu.reshape((b, 1, dims))) / (sigma + eps.eps)
    return _check_finite(out, "masked_standardize")


def masked_mean_pool(h: ag.Tensor, mask: SequenceMask) -> ag.Tensor:
    """Mean of active token vectors per sequence, (batch, dims)."""
    _check_tensor3(h, mask, "masked_mean_pool")
    mask.require_active()
    flags3 = mask.flags3(h.dtype)
    counts = mask.counts_col(h.dtype)
    out = (h * flags3).sum(axis=1) / counts
    return _check_finite(out, "masked_mean_pool")


def row_normalize(
    z: ag.Tensor, eps: EpsilonPolicy, return_flags: bool = False
) -> ag.Tensor | tuple[ag.Tensor, np.ndarray]:
    """Scale each row to unit L2 norm, flooring the norm at eps.

    Rows with norm below eps come back scaled by 1/eps instead of
    exploding; with return_flags=True a boolean vector marks them.
    """
    if not isinstance(z, ag.Tensor) or z.ndim != 2:
        raise ContractError("row_normalize expects a (rows, dims) tensor")
    norms = ag.sqrt((z * z).sum(axis=1, keepdims=True))
    floored = ag.maximum_const(norms, eps.eps)
    out = _check_finite(z / floored, "row_normalize")
    if return_flags:
        return out, norms.data[:, 0] < eps.eps
    return out
