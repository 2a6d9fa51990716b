"""Geometry probes for trained embeddings and hidden states.

All functions here are read-only: they take numpy arrays or checkpoint
state, build no gradient graphs, and emit plain dataclasses that the CLI
serializes as CSV plus JSON. Nothing plots; downstream notebooks can.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import ContractError, InsufficientDataError, InvalidDimensionError
from .scr import ScrConfig, cross_correlation
from .seeding import derive_seed
from .sir import SirConfig, cv_loss, uniformity_loss
from .tensor_core import EpsilonPolicy, SequenceMask, row_normalize


def _check_embeddings(emb: np.ndarray, op: str) -> np.ndarray:
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2:
        raise ContractError(f"{op} expects a (rows, dims) array, got shape {emb.shape}")
    if emb.shape[0] < 2:
        raise InsufficientDataError(f"{op} needs at least 2 rows, got {emb.shape[0]}")
    return emb


@dataclass
class VarianceProfile:
    """Per-dimension population variances with truncation boundaries."""

    variances: np.ndarray
    dims: tuple[int, ...]

    def cv(self, d: int | None = None, eps: float = 1e-5) -> float:
        """Coefficient of variation of the first d variances."""
        v = self.variances if d is None else self.variances[:d]
        vbar = float(v.mean())
        return float(np.sqrt(((v - vbar) ** 2).mean()) / (vbar + eps))

    def to_rows(self) -> list[tuple[int, float]]:
        return [(j, float(v)) for j, v in enumerate(self.variances)]


def variance_profile(emb: np.ndarray, dims: tuple[int, ...]) -> VarianceProfile:
    emb = _check_embeddings(emb, "variance_profile")
    if any(not 0 < d <= emb.shape[1] for d in dims):
        raise InvalidDimensionError(f"dims {dims} invalid for width {emb.shape[1]}")
    centered = emb - emb.mean(axis=0)
    return VarianceProfile(variances=(centered * centered).mean(axis=0), dims=tuple(dims))


@dataclass
class CrossCorrMap:
    """Prefix/residual correlation structure at one split width."""

    c: np.ndarray
    d: int
    d_res: int
    mean_abs: float
    frac_above_tau: float
    excess_mass: float
    tau: float


def cross_corr_map(
    x,
    d: int,
    tau: float = 0.1,
    eps: EpsilonPolicy | None = None,
    mask: SequenceMask | None = None,
) -> CrossCorrMap:
    """Cross-correlation between the d-prefix and the residual.

    Accepts either token-level hidden states (3-d plus a mask), where
    standardization is per sequence exactly as in the training loss, or
    a pooled embedding matrix (2-d), where columns are standardized over
    the corpus.
    """
    eps = eps or EpsilonPolicy()
    if isinstance(x, ag.Tensor):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        if mask is None:
            raise ContractError("token-level cross_corr_map needs a mask")
        cfg = ScrConfig(tau_corr=tau, eps=eps)
        with ag.no_grad():
            corr = cross_correlation(ag.constant(x), mask, d, cfg)
        c = corr.c.data
    elif x.ndim == 2:
        emb = _check_embeddings(x, "cross_corr_map")
        if not 0 < d < emb.shape[1]:
            raise InvalidDimensionError(f"split at d={d} invalid for width {emb.shape[1]}")
        centered = emb - emb.mean(axis=0)
        std = np.sqrt((centered * centered).mean(axis=0))
        z = centered / (std + eps.eps)
        c = z[:, :d].T @ z[:, d:] / emb.shape[0]
    else:
        raise ContractError(f"cross_corr_map expects a 2-d or 3-d array, got shape {x.shape}")
    abs_c = np.abs(c)
    return CrossCorrMap(
        c=c,
        d=d,
        d_res=c.shape[1],
        mean_abs=float(abs_c.mean()),
        frac_above_tau=float((abs_c > tau).mean()),
        excess_mass=float(np.maximum(abs_c - tau, 0.0).mean()),
        tau=tau,
    )


@dataclass
class CovariancePartition:
    """Covariance of pooled embeddings split into prefix/cross/residual blocks."""

    sigma_pre: np.ndarray
    sigma_cross: np.ndarray
    sigma_res: np.ndarray
    eig_min: float
    eig_max: float
    cross_fro: float


def _power_eig_range(sym: np.ndarray, iters: int = 300, seed: int = 0) -> tuple[float, float]:
    """Extreme eigenvalues of a symmetric PSD matrix by power iteration.

    The smallest eigenvalue comes from a second power iteration on the
    spectrum reflected about the largest one.
    """
    n = sym.shape[0]
    rng = np.random.default_rng(derive_seed(seed, "power-iteration"))

    def dominant(a: np.ndarray) -> float:
        v = rng.normal(size=n)
        v /= max(np.linalg.norm(v), 1e-30)
        for _ in range(iters):
            w = a @ v
            norm = np.linalg.norm(w)
            if norm < 1e-30:
                return 0.0
            v = w / norm
        return float(v @ a @ v)

    eig_max = dominant(sym)
    reflected = eig_max * np.eye(n) - sym
    eig_min = eig_max - dominant(reflected)
    return eig_min, eig_max


def covariance_partition(emb: np.ndarray, d: int, seed: int = 0) -> CovariancePartition:
    emb = _check_embeddings(emb, "covariance_partition")
    if not 0 < d < emb.shape[1]:
        raise InvalidDimensionError(f"split at d={d} invalid for width {emb.shape[1]}")
    centered = emb - emb.mean(axis=0)
    sigma = centered.T @ centered / emb.shape[0]
    sigma_pre = sigma[:d, :d]
    sigma_cross = sigma[:d, d:]
    sigma_res = sigma[d:, d:]
    eig_min, eig_max = _power_eig_range(sigma_pre, seed=seed)
    return CovariancePartition(
        sigma_pre=sigma_pre,
        sigma_cross=sigma_cross,
        sigma_res=sigma_res,
        eig_min=eig_min,
        eig_max=eig_max,
        cross_fro=float(np.linalg.norm(sigma_cross)),
    )


@dataclass
class UniformityReport:
    rows: list[dict]
    n_rows: int
    subsampled: bool
    seed: int


def uniformity_report(
    emb: np.ndarray,
    dims: tuple[int, ...],
    sir_cfg: SirConfig | None = None,
    max_rows: int = 2048,
    seed: int = 0,
) -> UniformityReport:
    """Uniformity and variance-spread per truncation width.

    Large corpora are subsampled to max_rows with a seeded draw so the
    report stays deterministic and the pairwise kernel stays small.
    """
    sir_cfg = sir_cfg or SirConfig()
    emb = _check_embeddings(emb, "uniformity_report")
    if any(not 0 < d <= emb.shape[1] for d in dims):
        raise InvalidDimensionError(f"dims {dims} invalid for width {emb.shape[1]}")
    subsampled = emb.shape[0] > max_rows
    if subsampled:
        rng = np.random.default_rng(derive_seed(seed, "uniformity-subsample"))
        keep = np.sort(rng.choice(emb.shape[0], size=max_rows, replace=False))
        emb = emb[keep]
    rows = []
    with ag.no_grad():
        for d in sorted(dims):
            z = ag.constant(emb[:, :d])
            z_hat = row_normalize(z, sir_cfg.eps)
            rows.append(
                {
                    "dim": int(d),
                    "uniformity": float(uniformity_loss(z_hat, sir_cfg).data),
                    "cv": float(cv_loss(z, sir_cfg.eps).data),
                }
            )
    return UniformityReport(rows=rows, n_rows=emb.shape[0], subsampled=subsampled, seed=seed)


def token_cross_corr(
    encoder,
    texts: list[str],
    layer: int,
    d: int,
    tau: float = 0.1,
    eps: EpsilonPolicy | None = None,
    batch_size: int = 64,
) -> CrossCorrMap:
    """Corpus-level token cross-correlation at one encoder layer.

    The training-loss statistic is a mean over sequences, so batches
    combine by sequence-count weighting and the batch size never changes
    the result.
    """
    from .data import encode_batch  # deferred; diagnostics stays import-light

    eps = eps or EpsilonPolicy()
    cfg = ScrConfig(tau_corr=tau, eps=eps)
    n = len(texts)
    if n < 1:
        raise InsufficientDataError("token_cross_corr needs at least one text")
    total = None
    with ag.no_grad():
        for start in range(0, n, batch_size):
            chunk = texts[start : start + batch_size]
            tokens, mask = encode_batch(chunk, encoder.config.vocab_size, encoder.config.max_len)
            trace = encoder.forward(tokens, mask, train_mode=False)
            c = cross_correlation(trace.layers[layer], mask, d, cfg).c.data
            weighted = c * (len(chunk) / n)
            total = weighted if total is None else total + weighted
    abs_c = np.abs(total)
    return CrossCorrMap(
        c=total,
        d=d,
        d_res=total.shape[1],
        mean_abs=float(abs_c.mean()),
        frac_above_tau=float((abs_c > tau).mean()),
        excess_mass=float(np.maximum(abs_c - tau, 0.0).mean()),
        tau=tau,
    )


# -- embedding file IO -------------------------------------------------------------


def save_embeddings(path, emb: np.ndarray) -> None:
    """Write embeddings with a one-line JSON header.

    Paths ending in .csv get text rows; anything else gets raw
    little-endian float bytes straight after the header line.
    """
    emb = np.ascontiguousarray(np.asarray(emb))
    if emb.ndim != 2:
        raise ContractError(f"save_embeddings expects a 2-d array, got shape {emb.shape}")
    text = str(path).endswith(".csv")
    header = {
        "n": emb.shape[0],
        "d": emb.shape[1],
        "dtype": str(emb.dtype),
        "format": "csv" if text else "raw",
    }
    if text:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for row in emb:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
    else:
        with open(path, "wb") as fh:
            fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
            fh.write(emb.astype(emb.dtype.newbyteorder("<")).tobytes())


def load_embeddings(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
            n, d = int(header["n"]), int(header["d"])
            dtype = np.dtype(header["dtype"])
            fmt = header["format"]
        except (ValueError, KeyError) as exc:
            raise ContractError(f"{path}: bad embedding header ({exc})") from None
        if fmt == "csv":
            rows = [
                [float(v) for v in line.decode("utf-8").split(",")] for line in fh if line.strip()
            ]
            emb = np.array(rows, dtype=dtype)
        elif fmt == "raw":
            emb = np.frombuffer(fh.read(), dtype=dtype.newbyteorder("<")).astype(dtype)
            emb = emb.reshape((n, d))
        else:
            raise ContractError(f"{path}: unknown embedding format {fmt!r}")
    if emb.shape != (n, d):
        raise ContractError(f"{path}: header says {(n, d)}, payload has {emb.shape}")
    return emb
