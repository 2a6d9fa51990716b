"""Training loop: nested contrastive objective plus alignment regularizers.

The total objective is

    L_total = L_mrl + gamma * L_align

where L_align is the mean, over every (aligned layer, truncation width)
site, of the soft-collapse loss on token states plus the isotropy loss
on pooled prefixes. Sites with the full width carry no residual, so only
the isotropy term applies there.

Everything random in a run (init, shuffling, dropout) derives from one
config seed via named sub-streams, so two runs with the same config and
corpus produce byte-identical metrics.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .contrastive import ContrastiveConfig, ViewPair, mrl_loss, truncate
from .encoder import EncoderConfig, ForwardTrace, LayerSelection, TinyEncoder
from .errors import ConfigError, NanLossError
from .data import encode_batch
from .scr import ScrConfig, scr_loss
from .seeding import derive_seed
from .sir import SirConfig, sir_loss
from .tensor_core import EpsilonPolicy, masked_mean_pool

METRICS_FILE = "metrics.ndjson"
CHECKPOINT_FILE = "checkpoint.npz"


@dataclass
class TrainConfig:
    epochs: int = 5
    lr: float = 1e-3
    batch_size: int = 32
    gamma: float = 0.6
    seed: int = 0
    temperature: float = 0.05
    dims: tuple[int, ...] = (4, 8, 16, 32)
    tau_corr: float = 0.1
    lambda_var: float = 0.1
    kernel_t: float = 2.0
    eps: float = 1e-5
    aligned_layers: tuple[int, ...] = (1, 2)
    align_pairs: tuple[tuple[int, int], ...] | None = None
    use_scr: bool = True
    use_sir: bool = True
    align_view: str = "a"
    schedule: str = "cosine"
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    clip_norm: float | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self) -> None:
        self.encoder.validate()
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if not (np.isfinite(self.lr) and self.lr >= 0.0):
            raise ConfigError("lr", f"must be a finite float >= 0, got {self.lr}")
        if self.batch_size < 2:
            raise ConfigError("batch_size", f"must be >= 2, got {self.batch_size}")
        if not (np.isfinite(self.gamma) and self.gamma >= 0.0):
            raise ConfigError("gamma", f"must be a finite float >= 0, got {self.gamma}")
        if not self.temperature > 0.0:
            raise ConfigError("temperature", f"must be > 0, got {self.temperature}")
        dims = tuple(self.dims)
        if len(dims) == 0 or list(dims) != sorted(set(dims)) or dims[0] < 1:
            raise ConfigError("dims", f"must be strictly increasing positives, got {self.dims}")
        if dims[-1] != self.encoder.d_full:
            raise ConfigError(
                "dims", f"largest width {dims[-1]} must equal encoder d_full {self.encoder.d_full}"
            )
        if not 0.0 <= self.tau_corr <= 1.0:
            raise ConfigError("tau_corr", f"must lie in [0, 1], got {self.tau_corr}")
        if self.lambda_var < 0.0:
            raise ConfigError("lambda_var", f"must be >= 0, got {self.lambda_var}")
        if not self.kernel_t > 0.0:
            raise ConfigError("kernel_t", f"must be > 0, got {self.kernel_t}")
        if not self.eps > 0.0:
            raise ConfigError("eps", f"must be > 0, got {self.eps}")
        LayerSelection(tuple(self.aligned_layers)).validate(self.encoder.n_layers)
        if self.align_pairs is not None:
            sites = {(l, d) for l in self.aligned_layers for d in dims}
            bad = [p for p in self.align_pairs if tuple(p) not in sites]
            if bad or len(self.align_pairs) == 0:
                raise ConfigError(
                    "align_pairs",
                    f"must be a non-empty subset of aligned_layers x dims, offending {bad}",
                )
        if self.align_view not in ("a", "b", "both"):
            raise ConfigError("align_view", f"must be 'a', 'b' or 'both', got {self.align_view!r}")
        if self.schedule != "cosine":
            raise ConfigError("schedule", f"only 'cosine' is supported, got {self.schedule!r}")
        if not (0.0 <= self.betas[0] < 1.0 and 0.0 <= self.betas[1] < 1.0):
            raise ConfigError("betas", f"must lie in [0, 1), got {self.betas}")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay", f"must be >= 0, got {self.weight_decay}")
        if not self.adam_eps > 0.0:
            raise ConfigError("adam_eps", f"must be > 0, got {self.adam_eps}")
        if self.clip_norm is not None and not self.clip_norm > 0.0:
            raise ConfigError("clip_norm", f"must be > 0 or null, got {self.clip_norm}")

    # Loss-module views of this config.

    def epsilon(self) -> EpsilonPolicy:
        return EpsilonPolicy(self.eps)

    def scr(self) -> ScrConfig:
        return ScrConfig(tau_corr=self.tau_corr, lambda_var=self.lambda_var, eps=self.epsilon())

    def sir(self) -> SirConfig:
        return SirConfig(kernel_t=self.kernel_t, eps=self.epsilon())

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(
            temperature=self.temperature, dims=tuple(self.dims), eps=self.epsilon()
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        if not isinstance(raw, dict):
            raise ConfigError("<root>", f"expected a JSON object, got {type(raw).__name__}")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(key, "unknown field")
        kwargs = dict(raw)
        if "encoder" in kwargs:
            enc_raw = kwargs["encoder"]
            if not isinstance(enc_raw, dict):
                raise ConfigError("encoder", "must be a JSON object")
            enc_known = {f.name for f in dataclasses.fields(EncoderConfig)}
            for key in enc_raw:
                if key not in enc_known:
                    raise ConfigError(f"encoder.{key}", "unknown field")
            kwargs["encoder"] = EncoderConfig(**enc_raw)
        for key in ("dims", "aligned_layers", "betas"):
            if key in kwargs and isinstance(kwargs[key], list):
                kwargs[key] = tuple(kwargs[key])
        if kwargs.get("align_pairs") is not None and isinstance(kwargs["align_pairs"], list):
            kwargs["align_pairs"] = tuple(tuple(p) for p in kwargs["align_pairs"])
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError("<root>", str(exc)) from None
        cfg.validate()
        return cfg


PRESETS: dict[str, dict] = {
    "mic": {},
    "mrl": {"gamma": 0.0},
    "scr-only": {"use_sir": False},
    "sir-only": {"use_scr": False},
    "paper": {"lr": 2e-5},
}


def preset_config(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}, expected one of {sorted(PRESETS)}")
    cfg = TrainConfig(**{**PRESETS[name], **overrides})
    cfg.validate()
    return cfg


# -- loss assembly ---------------------------------------------------------------


@dataclass
class AlignEntry:
    """Loss components at one (layer, truncation width) alignment site."""

    layer: int
    dim: int
    has_residual: bool
    l_corr: float = 0.0
    l_var: float = 0.0
    l_scr: float = 0.0
    l_cv: float = 0.0
    l_unif: float = 0.0
    l_sir: float = 0.0

    def total(self) -> float:
        return self.l_scr + self.l_sir

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "dim": self.dim,
            "has_residual": self.has_residual,
            "l_corr": self.l_corr,
            "l_var": self.l_var,
            "l_scr": self.l_scr,
            "l_cv": self.l_cv,
            "l_unif": self.l_unif,
            "l_sir": self.l_sir,
        }


@dataclass
class LossBreakdown:
    """Everything logged for one optimization step."""

    step: int
    lr: float
    l_total: float
    l_mrl: float
    l_align: float
    infonce: dict[int, float]
    entries: list[AlignEntry]

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "lr": self.lr,
            "l_total": self.l_total,
            "l_mrl": self.l_mrl,
            "l_align": self.l_align,
            "infonce": {str(k): v for k, v in self.infonce.items()},
            "entries": [e.to_dict() for e in self.entries],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "LossBreakdown":
        return cls(
            step=raw["step"],
            lr=raw["lr"],
            l_total=raw["l_total"],
            l_mrl=raw["l_mrl"],
            l_align=raw["l_align"],
            infonce={int(k): v for k, v in raw["infonce"].items()},
            entries=[
                AlignEntry(**entry) for entry in raw["entries"]
            ],
        )


def _align_sites(cfg: TrainConfig) -> list[tuple[int, int]]:
    if cfg.align_pairs is not None:
        return [tuple(p) for p in cfg.align_pairs]
    return [(l, d) for l in sorted(cfg.aligned_layers) for d in sorted(cfg.dims)]


def align_loss(trace: ForwardTrace, cfg: TrainConfig) -> tuple[ag.Tensor, list[AlignEntry]]:
    """Mean SCR + SIR over all alignment sites of one forward trace."""
    scr_cfg = cfg.scr()
    sir_cfg = cfg.sir()
    d_full = cfg.encoder.d_full
    sites = _align_sites(cfg)
    pooled_cache: dict[int, ag.Tensor] = {}
    terms: list[ag.Tensor] = []
    entries: list[AlignEntry] = []
    for layer, dim in sites:
        h = trace.layers[layer]
        entry = AlignEntry(layer=layer, dim=dim, has_residual=dim < d_full)
        parts: list[ag.Tensor] = []
        if cfg.use_scr and dim < d_full:
            loss_scr, scr_terms = scr_loss(h, trace.mask, dim, scr_cfg)
            parts.append(loss_scr)
            entry.l_corr, entry.l_var, entry.l_scr = (
                scr_terms.l_corr,
                scr_terms.l_var,
                scr_terms.l_scr,
            )
        if cfg.use_sir:
            if layer not in pooled_cache:
                pooled_cache[layer] = masked_mean_pool(h, trace.mask)
            z = truncate(pooled_cache[layer], dim)
            loss_sir, sir_terms = sir_loss(z, sir_cfg)
            parts.append(loss_sir)
            entry.l_cv, entry.l_unif, entry.l_sir = (
                sir_terms.l_cv,
                sir_terms.l_unif,
                sir_terms.l_sir,
            )
        site_total = parts[0] if parts else ag.constant(0.0)
        for p in parts[1:]:
            site_total = site_total + p
        terms.append(site_total)
        entries.append(entry)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms)), entries


def _mean_entries(per_view: list[list[AlignEntry]]) -> list[AlignEntry]:
    if len(per_view) == 1:
        return per_view[0]
    out = []
    n = len(per_view)
    for site in zip(*per_view):
        first = site[0]
        out.append(
            AlignEntry(
                layer=first.layer,
                dim=first.dim,
                has_residual=first.has_residual,
                l_corr=sum(e.l_corr for e in site) / n,
                l_var=sum(e.l_var for e in site) / n,
                l_scr=sum(e.l_scr for e in site) / n,
                l_cv=sum(e.l_cv for e in site) / n,
                l_unif=sum(e.l_unif for e in site) / n,
                l_sir=sum(e.l_sir for e in site) / n,
            )
        )
    return out


def compute_losses(
    encoder: TinyEncoder,
    tokens: np.ndarray,
    mask,
    cfg: TrainConfig,
    step: int,
) -> tuple[ag.Tensor, dict]:
    """Assemble L_total for one batch; shared by training and gradcheck.

    Returns the scalar loss tensor and a parts dict with float values
    for logging and NaN screening.
    """
    seed_a = derive_seed(cfg.seed, "dropout", step, "a")
    seed_b = derive_seed(cfg.seed, "dropout", step, "b")
    trace_a, trace_b = encoder.two_view_forward(tokens, mask, seed_a, seed_b)
    pair = ViewPair(trace_a.pooled, trace_b.pooled)
    l_mrl, per_dim = mrl_loss(pair, cfg.contrastive())

    views = {"a": [trace_a], "b": [trace_b], "both": [trace_a, trace_b]}[cfg.align_view]
    align_terms = []
    entry_sets = []
    for trace in views:
        term, entries = align_loss(trace, cfg)
        align_terms.append(term)
        entry_sets.append(entries)
    l_align = align_terms[0]
    for t in align_terms[1:]:
        l_align = l_align + t
    if len(align_terms) > 1:
        l_align = l_align * (1.0 / len(align_terms))

    l_total = l_mrl + cfg.gamma * l_align
    parts = {
        "l_mrl": float(l_mrl.data),
        "l_align": float(l_align.data),
        "l_total": float(l_total.data),
        "infonce": per_dim,
        "entries": _mean_entries(entry_sets),
    }
    return l_total, parts


# -- optimization ------------------------------------------------------------------


def cosine_lr(base: float, step: int, total_steps: int) -> float:
    """Cosine decay from base at step 0 to 0 at the final step."""
    if total_steps <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


class AdamW:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(
        self,
        params: dict[str, ag.Tensor],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"opt.t": np.array(self.t)}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["opt.t"])
        for name in self.params:
            self.m[name] = arrays[f"opt.m.{name}"].copy()
            self.v[name] = arrays[f"opt.v.{name}"].copy()


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return total


# -- the loop ---------------------------------------------------------------------


@dataclass
class TrainResult:
    encoder: TinyEncoder
    metrics: list[LossBreakdown]
    global_step: int
    total_steps: int


class Trainer:
    """Owns one training run: batching, stepping, logging, checkpointing."""

    def __init__(self, cfg: TrainConfig, texts: list[str]):
        cfg.validate()
        n = len(texts)
        if n < 2:
            raise ConfigError("corpus", f"need at least 2 sentences, got {n}")
        if n > cfg.batch_size and n % cfg.batch_size == 1:
            raise ConfigError(
                "batch_size",
                f"corpus size {n} leaves a trailing batch of 1, which breaks "
                "batch-level statistics; adjust batch_size or corpus size",
            )
        self.cfg = cfg
        self.texts = texts
        self.steps_per_epoch = math.ceil(n / cfg.batch_size)
        self.total_steps = cfg.epochs * self.steps_per_epoch
        self.encoder = TinyEncoder(
            dataclasses.replace(cfg.encoder, init_seed=derive_seed(cfg.seed, "init"))
        )
        self.opt = AdamW(
            self.encoder.parameters(),
            betas=cfg.betas,
            eps=cfg.adam_eps,
            weight_decay=cfg.weight_decay,
        )
        self.global_step = 0

    def _batch(self, step: int) -> tuple[np.ndarray, object]:
        epoch = step // self.steps_per_epoch
        idx = step % self.steps_per_epoch
        order = np.random.default_rng(derive_seed(self.cfg.seed, "shuffle", epoch)).permutation(
            len(self.texts)
        )
        chosen = order[idx * self.cfg.batch_size : (idx + 1) * self.cfg.batch_size]
        batch_texts = [self.texts[i] for i in chosen]
        return encode_batch(batch_texts, self.cfg.encoder.vocab_size, self.cfg.encoder.max_len)

    def train_step(self, step: int) -> LossBreakdown:
        """One forward/backward/update cycle at the given global step."""
        cfg = self.cfg
        tokens, mask = self._batch(step)
        loss, parts = compute_losses(self.encoder, tokens, mask, cfg, step)

        for dim, value in parts["infonce"].items():
            if not math.isfinite(value):
                raise NanLossError(f"infonce@d={dim}", step)
        for entry in parts["entries"]:
            for key in ("l_corr", "l_var", "l_cv", "l_unif"):
                if not math.isfinite(getattr(entry, key)):
                    raise NanLossError(f"{key}@layer={entry.layer},d={entry.dim}", step)
        for key in ("l_mrl", "l_align", "l_total"):
            if not math.isfinite(parts[key]):
                raise NanLossError(key, step)

        for p in self.encoder.parameters().values():
            p.zero_grad()
        ag.backward(loss)
        grads = {}
        for name, p in self.encoder.parameters().items():
            if p.grad is None:
                continue
            if not np.isfinite(p.grad).all():
                raise NanLossError(f"grad:{name}", step)
            grads[name] = p.grad
        if cfg.clip_norm is not None:
            clip_gradients(grads, cfg.clip_norm)

        lr_t = cosine_lr(cfg.lr, step, self.total_steps)
        self.opt.step(lr_t, grads)
        self.global_step = step + 1
        return LossBreakdown(
            step=step,
            lr=lr_t,
            l_total=parts["l_total"],
            l_mrl=parts["l_mrl"],
            l_align=parts["l_align"],
            infonce=parts["infonce"],
            entries=parts["entries"],
        )

    def save_checkpoint(self, path) -> None:
        extra = self.opt.state_arrays()
        extra["global_step"] = np.array(self.global_step)
        self.encoder.save(path, extra=extra, meta={"train_config": self.cfg.to_dict()})

    def load_checkpoint(self, path) -> None:
        encoder, extra, _ = TinyEncoder.load(path)
        self.encoder = encoder
        self.opt = AdamW(
            encoder.parameters(),
            betas=self.cfg.betas,
            eps=self.cfg.adam_eps,
            weight_decay=self.cfg.weight_decay,
        )
        self.opt.load_state(extra)
        self.global_step = int(extra["global_step"])

    def run(
        self,
        out_dir: Path | None = None,
        resume: bool = False,
        max_steps: int | None = None,
    ) -> TrainResult:
        """Train from the current state to total_steps (or max_steps).

        With out_dir set, appends one NDJSON metrics line per step and
        writes a resumable checkpoint at the end.
        """
        metrics: list[LossBreakdown] = []
        stream = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            checkpoint = out_dir / CHECKPOINT_FILE
            if resume:
                if not checkpoint.exists():
                    raise ConfigError("resume", f"no checkpoint at {checkpoint}")
                self.load_checkpoint(checkpoint)
            stream = open(out_dir / METRICS_FILE, "a" if resume else "w", encoding="utf-8")
        try:
            stop = self.total_steps if max_steps is None else min(max_steps, self.total_steps)
            for step in range(self.global_step, stop):
                breakdown = self.train_step(step)
                metrics.append(breakdown)
                if stream is not None:
                    stream.write(json.dumps(breakdown.to_dict(), separators=(",", ":")) + "\n")
        finally:
            if stream is not None:
                stream.close()
        if out_dir is not None:
            self.save_checkpoint(out_dir / CHECKPOINT_FILE)
        return TrainResult(
            encoder=self.encoder,
            metrics=metrics,
            global_step=self.global_step,
            total_steps=self.total_steps,
        )
