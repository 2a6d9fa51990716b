"""Gradient certification scenarios for every differentiable loss path.

Each scenario freezes a small random instance, wraps one loss as a
closure over leaf tensors, and runs the central-difference harness.
The end-to-end scenario drives the full training objective through the
4-layer encoder so every weight tensor is exercised. Shared between the
CLI gradcheck command and the test suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import GradCheckReport, finite_diff_check
from .contrastive import ContrastiveConfig, ViewPair, info_nce, mrl_loss
from .encoder import EncoderConfig, TinyEncoder
from .errors import ConfigError
from .scr import ScrConfig, corr_penalty, cross_correlation, variance_floor
from .seeding import derive_seed
from .sir import SirConfig, cv_loss, uniformity_loss
from .tensor_core import EpsilonPolicy, SequenceMask, row_normalize
from .trainer import TrainConfig, compute_losses

LOSS_SCENARIOS = ("corr_penalty", "variance_floor", "cv", "uniformity", "info_nce", "mrl")
SCOPES = ("losses", "end2end", "all")


def _random_mask(rng: np.random.Generator, b: int, length: int) -> SequenceMask:
    flags = np.zeros((b, length))
    for i in range(b):
        n = int(rng.integers(2, length + 1))
        flags[i, :n] = 1.0
    return SequenceMask(flags)


def _token_states(rng: np.random.Generator, b: int, length: int, d: int) -> ag.Tensor:
    return ag.Tensor(rng.normal(0.0, 1.0, size=(b, length, d)), requires_grad=True)


def build_scenario(name: str, seed: int):
    """Return (loss_fn, params) for one named scenario."""
    rng = np.random.default_rng(derive_seed(seed, "gradcheck", name))
    eps = EpsilonPolicy()
    if name == "corr_penalty":
        h = _token_states(rng, 2, 4, 8)
        mask = _random_mask(rng, 2, 4)
        cfg = ScrConfig(eps=eps)
        return lambda: corr_penalty(cross_correlation(h, mask, 3, cfg), cfg), {"h": h}
    if name == "variance_floor":
        h = _token_states(rng, 2, 4, 8)
        mask = _random_mask(rng, 2, 4)
        return lambda: variance_floor(h, mask, 3), {"h": h}
    if name == "cv":
        z = ag.Tensor(rng.normal(0.0, 1.0, size=(8, 6)), requires_grad=True)
        return lambda: cv_loss(z, eps), {"z": z}
    if name == "uniformity":
        z = ag.Tensor(rng.normal(0.0, 1.0, size=(5, 8)), requires_grad=True)
        cfg = SirConfig(eps=eps)
        return lambda: uniformity_loss(row_normalize(z, eps), cfg), {"z": z}
    if name == "info_nce":
        z_a = ag.Tensor(rng.normal(0.0, 1.0, size=(4, 8)), requires_grad=True)
        z_b = ag.Tensor(rng.normal(0.0, 1.0, size=(4, 8)), requires_grad=True)
        return lambda: info_nce(z_a, z_b, 0.05, eps), {"z_a": z_a, "z_b": z_b}
    if name == "mrl":
        z_a = ag.Tensor(rng.normal(0.0, 1.0, size=(4, 8)), requires_grad=True)
        z_b = ag.Tensor(rng.normal(0.0, 1.0, size=(4, 8)), requires_grad=True)
        cfg = ContrastiveConfig(dims=(2, 4, 8), eps=eps)
        return lambda: mrl_loss(ViewPair(z_a, z_b), cfg)[0], {"z_a": z_a, "z_b": z_b}
    if name == "end2end":
        enc_cfg = EncoderConfig(
            vocab_size=53,
            d_full=16,
            n_layers=4,
            n_heads=4,
            ff_multiplier=2,
            dropout_rate=0.1,
            max_len=8,
            init_seed=derive_seed(seed, "gradcheck-init"),
        )
        cfg = TrainConfig(
            seed=seed,
            dims=(4, 8, 16),
            aligned_layers=(1, 2),
            batch_size=4,
            encoder=enc_cfg,
        )
        cfg.validate()
        encoder = TinyEncoder(enc_cfg)
        tokens = rng.integers(1, enc_cfg.vocab_size, size=(3, 6))
        mask = _random_mask(rng, 3, 6)
        return (
            lambda: compute_losses(encoder, tokens, mask, cfg, step=0)[0],
            encoder.parameters(),
        )
    raise ConfigError("scenario", f"unknown gradcheck scenario {name!r}")


@dataclass
class CertificationRun:
    scenario: str
    seed: int
    report: GradCheckReport

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "seed": self.seed, **self.report.to_dict()}


@dataclass
class CertificationReport:
    """Aggregate of one gradcheck invocation across scenarios and seeds."""

    scope: str
    tol: float
    h: float
    runs: list[CertificationRun] = field(default_factory=list)

    @property
    def max_rel(self) -> float:
        return max((r.report.max_rel for r in self.runs), default=0.0)

    def passed(self) -> bool:
        return all(r.report.passed(self.tol) for r in self.runs)

    def worst(self) -> tuple[str, int, str, float]:
        run = max(self.runs, key=lambda r: r.report.max_rel)
        entry = run.report.worst()
        return run.scenario, run.seed, entry.name, entry.max_rel

    def to_dict(self) -> dict:
        return {
            "scope": self.scope,
            "tol": self.tol,
            "h": self.h,
            "passed": self.passed(),
            "max_rel": self.max_rel,
            "runs": [r.to_dict() for r in self.runs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def run_scope(
    scope: str,
    seeds: tuple[int, ...] = (0, 1, 2),
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int = 24,
) -> CertificationReport:
    """Certify all scenarios in a scope across the given seeds."""
    if scope not in SCOPES:
        raise ConfigError("scope", f"must be one of {SCOPES}, got {scope!r}")
    names: list[str] = []
    if scope in ("losses", "all"):
        names.extend(LOSS_SCENARIOS)
    if scope in ("end2end", "all"):
        names.append("end2end")
    report = CertificationReport(scope=scope, tol=tol, h=h)
    for name in names:
        for seed in seeds:
            loss_fn, params = build_scenario(name, seed)
            coords = max_coords if name == "end2end" else 64
            run = finite_diff_check(loss_fn, params, h=h, max_coords=coords, seed=seed, tol=tol)
            report.runs.append(CertificationRun(scenario=name, seed=seed, report=run))
    return report
