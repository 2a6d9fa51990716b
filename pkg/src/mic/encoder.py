"""Desk-scale pre-norm transformer encoder with traced hidden states.

Small enough that every gradient path can be certified by finite
differences in seconds, but structurally faithful: token plus learned
positional embeddings, multi-head self-attention with an additive key
mask, GELU feed-forward blocks, residual connections, and mean pooling
over active tokens. The forward pass records every layer's hidden
states so alignment losses can attach anywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .errors import CheckpointError, ConfigError, ContractError, InvalidDimensionError, VocabError
from .seeding import derive_seed
from .tensor_core import SequenceMask, masked_mean_pool

CHECKPOINT_FORMAT_VERSION = 1

_LN_EPS = 1e-5
_MASK_NEG = -1e9
_GELU_C = 0.7978845608028654  # sqrt(2/pi)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 1000
    d_full: int = 32
    n_layers: int = 4
    n_heads: int = 4
    ff_multiplier: int = 4
    dropout_rate: float = 0.1
    max_len: int = 32
    init_seed: int = 0
    dtype: str = "float64"

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("vocab_size", f"must be >= 2, got {self.vocab_size}")
        if self.d_full < 2:
            raise ConfigError("d_full", f"must be >= 2, got {self.d_full}")
        if self.n_layers < 1:
            raise ConfigError("n_layers", f"must be >= 1, got {self.n_layers}")
        if self.n_heads < 1 or self.d_full % self.n_heads != 0:
            raise ConfigError("n_heads", f"must divide d_full={self.d_full}, got {self.n_heads}")
        if self.ff_multiplier < 1:
            raise ConfigError("ff_multiplier", f"must be >= 1, got {self.ff_multiplier}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate", f"must lie in [0, 1), got {self.dropout_rate}")
        if self.max_len < 1:
            raise ConfigError("max_len", f"must be >= 1, got {self.max_len}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype", f"must be float64 or float32, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass(frozen=True)
class LayerSelection:
    """Which encoder layers the alignment losses attach to (0-based)."""

    aligned_layers: tuple[int, ...]

    def validate(self, n_layers: int) -> None:
        if len(self.aligned_layers) == 0:
            raise ConfigError("aligned_layers", "must name at least one layer")
        bad = [l for l in self.aligned_layers if not 0 <= l < n_layers]
        if bad:
            raise ConfigError("aligned_layers", f"indices {bad} outside [0, {n_layers})")
        if list(self.aligned_layers) != sorted(set(self.aligned_layers)):
            raise ConfigError("aligned_layers", f"must be strictly increasing, got {self.aligned_layers}")


@dataclass
class ForwardTrace:
    """Hidden states after every block, plus the pooled sentence embedding."""

    layers: list[ag.Tensor]
    pooled: ag.Tensor
    mask: SequenceMask


def _layer_norm(x: ag.Tensor, gain: ag.Tensor, bias: ag.Tensor) -> ag.Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / ag.sqrt(var + _LN_EPS) * gain + bias


def _gelu(x: ag.Tensor) -> ag.Tensor:
    inner = (x + 0.044715 * (x ** 3.0)) * _GELU_C
    return 0.5 * x * (1.0 + ag.tanh(inner))


class TinyEncoder:
    """Transformer encoder over hash-bucketed tokens.

    Weights live in a flat name -> Tensor dict so the trainer, the
    checkpoint format, and the gradient certifier all share one view of
    the parameter space.
    """

    def __init__(self, config: EncoderConfig):
        config.validate()
        self.config = config
        self.params: dict[str, ag.Tensor] = {}
        self._init_params()

    # -- parameters ----------------------------------------------------------

    def _add_param(self, name: str, data: np.ndarray) -> None:
        self.params[name] = ag.Tensor(data.astype(self.config.np_dtype), requires_grad=True)

    def _init_params(self) -> None:
        cfg = self.config
        rng = np.random.default_rng(derive_seed(cfg.init_seed, "encoder-init"))
        d = cfg.d_full
        ff = cfg.ff_multiplier * d

        def xavier(n_in: int, n_out: int) -> np.ndarray:
            limit = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-limit, limit, size=(n_in, n_out))

        self._add_param("tok_emb", rng.uniform(-0.1, 0.1, size=(cfg.vocab_size, d)))
        self._add_param("pos_emb", rng.uniform(-0.1, 0.1, size=(cfg.max_len, d)))
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            self._add_param(p + "ln1.g", np.ones(d))
            self._add_param(p + "ln1.b", np.zeros(d))
            for proj in ("wq", "wk", "wv", "wo"):
                self._add_param(p + "attn." + proj, xavier(d, d))
            # no key bias: softmax cancels a per-query constant, so its
            # gradient would be identically zero
            for proj in ("bq", "bv", "bo"):
                self._add_param(p + "attn." + proj, np.zeros(d))
            self._add_param(p + "ln2.g", np.ones(d))
            self._add_param(p + "ln2.b", np.zeros(d))
            self._add_param(p + "ff.w1", xavier(d, ff))
            self._add_param(p + "ff.b1", np.zeros(ff))
            self._add_param(p + "ff.w2", xavier(ff, d))
            self._add_param(p + "ff.b2", np.zeros(d))

    def parameters(self) -> dict[str, ag.Tensor]:
        return self.params

    # -- forward -------------------------------------------------------------

    def forward(
        self,
        tokens: np.ndarray,
        mask: SequenceMask,
        dropout_seed: int = 0,
        train_mode: bool = False,
    ) -> ForwardTrace:
        """Run the stack and trace hidden states after every block.

        tokens is an int (batch, length) array; entries at masked
        positions are still embedded but cannot influence active
        positions, and pooling ignores them entirely.
        """
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ContractError(f"tokens must be 2-d, got shape {tokens.shape}")
        if tokens.shape != (mask.batch, mask.tokens):
            raise ContractError(f"tokens shape {tokens.shape} does not match mask")
        if tokens.size == 0:
            raise ContractError("tokens array is empty")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise VocabError(
                f"token ids must lie in [0, {cfg.vocab_size}), got range "
                f"[{tokens.min()}, {tokens.max()}]"
            )
        b, length = tokens.shape
        if length > cfg.max_len:
            raise InvalidDimensionError(f"sequence length {length} exceeds max_len {cfg.max_len}")
        mask.require_active()

        drop_rng = np.random.default_rng(dropout_seed)
        dtype = cfg.np_dtype

        def dropout(t: ag.Tensor) -> ag.Tensor:
            if not train_mode or cfg.dropout_rate == 0.0:
                return t
            keep = drop_rng.random(t.shape) >= cfg.dropout_rate
            scale = 1.0 / (1.0 - cfg.dropout_rate)
            return t * ag.constant(keep.astype(dtype) * scale)

        x = ag.embedding(self.params["tok_emb"], tokens) + ag.embedding(
            self.params["pos_emb"], np.arange(length)
        )
        x = dropout(x)

        # Masked keys get a large negative score; exp underflows to exactly
        # zero, so padding length never changes active positions.
        add_mask = ag.constant(((mask.flags - 1.0) * -_MASK_NEG)[:, None, None, :].astype(dtype))

        n_heads = cfg.n_heads
        head_dim = cfg.d_full // n_heads
        # plain float, not np.float64: a typed scalar would promote
        # float32 activations
        scale = 1.0 / math.sqrt(head_dim)
        layers: list[ag.Tensor] = []
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            attn_in = _layer_norm(x, self.params[p + "ln1.g"], self.params[p + "ln1.b"])

            def heads(t: ag.Tensor) -> ag.Tensor:
                return t.reshape((b, length, n_heads, head_dim)).swapaxes(1, 2)

            q = heads(attn_in @ self.params[p + "attn.wq"] + self.params[p + "attn.bq"])
            k = heads(attn_in @ self.params[p + "attn.wk"])
            v = heads(attn_in @ self.params[p + "attn.wv"] + self.params[p + "attn.bv"])
            scores = (q @ k.swapaxes(2, 3)) * scale + add_mask
            shift = ag.constant(scores.data.max(axis=-1, keepdims=True))
            weights = ag.exp(scores - shift)
            probs = weights / weights.sum(axis=-1, keepdims=True)
            ctx = (probs @ v).swapaxes(1, 2).reshape((b, length, cfg.d_full))
            x = x + dropout(ctx @ self.params[p + "attn.wo"] + self.params[p + "attn.bo"])

            ff_in = _layer_norm(x, self.params[p + "ln2.g"], self.params[p + "ln2.b"])
            hidden = _gelu(ff_in @ self.params[p + "ff.w1"] + self.params[p + "ff.b1"])
            x = x + dropout(hidden @ self.params[p + "ff.w2"] + self.params[p + "ff.b2"])
            layers.append(x)

        pooled = masked_mean_pool(x, mask)
        return ForwardTrace(layers=layers, pooled=pooled, mask=mask)

    def two_view_forward(
        self, tokens: np.ndarray, mask: SequenceMask, seed_a: int, seed_b: int
    ) -> tuple[ForwardTrace, ForwardTrace]:
        """Encode the same batch twice with independent dropout draws."""
        if seed_a == seed_b:
            raise ContractError("two_view_forward needs distinct dropout seeds")
        trace_a = self.forward(tokens, mask, dropout_seed=seed_a, train_mode=True)
        trace_b = self.forward(tokens, mask, dropout_seed=seed_b, train_mode=True)
        return trace_a, trace_b

    # -- checkpointing ---------------------------------------------------------

    def save(self, path, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
        """Write weights (and optional trainer arrays) to one npz file."""
        header = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": asdict(self.config),
            "weights": sorted(self.params),
        }
        if meta:
            header.update(meta)
        arrays = {f"w.{name}": t.data for name, t in self.params.items()}
        if extra:
            arrays.update({f"x.{k}": v for k, v in extra.items()})
        np.savez(path, __meta__=np.array(json.dumps(header, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> tuple["TinyEncoder", dict[str, np.ndarray], dict]:
        """Rebuild an encoder from a checkpoint.

        Returns (encoder, extra_arrays, header). Missing weights or
        shape mismatches against the stored config are hard errors.
        """
        try:
            with np.load(path, allow_pickle=False) as bundle:
                if "__meta__" not in bundle:
                    raise CheckpointError(f"{path}: missing __meta__ header")
                header = json.loads(str(bundle["__meta__"]))
                if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                    raise CheckpointError(
                        f"{path}: format_version {header.get('format_version')} "
                        f"unsupported (expected {CHECKPOINT_FORMAT_VERSION})"
                    )
                config = EncoderConfig(**header["config"])
                enc = cls(config)
                extra: dict[str, np.ndarray] = {}
                for key in bundle.files:
                    if key.startswith("x."):
                        extra[key[2:]] = bundle[key]
                for name, tensor in enc.params.items():
                    key = f"w.{name}"
                    if key not in bundle:
                        raise CheckpointError(f"{path}: missing weight '{name}'")
                    arr = bundle[key]
                    if arr.shape != tensor.data.shape:
                        raise CheckpointError(
                            f"{path}: weight '{name}' has shape {arr.shape}, "
                            f"config implies {tensor.data.shape}"
                        )
                    tensor.data = arr.astype(config.np_dtype)
        except FileNotFoundError:
            raise
        except (OSError, ValueError, KeyError, TypeError) as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
        return enc, extra, header
