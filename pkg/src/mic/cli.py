"""Command-line entry point.

Five subcommands: gen-corpus, train, diagnose, gradcheck, eval. Every
command is deterministic given its arguments; anything random flows from
--seed through named sub-streams. A manifest written before training
records config, input digests, and outputs, so a run can be reproduced
from the manifest alone.

Exit codes: 0 success, 1 failed check (gradient certification, NaN
abort), 2 usage or configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import diagnostics as diag
from .data import (
    gen_clusters,
    gen_pairs,
    gen_sts_graded,
    read_labeled,
    read_pairs,
    read_sts,
    read_train_texts,
    write_tsv,
)
from .encoder import TinyEncoder
from .errors import (
    ConfigError,
    DeterminismError,
    MicError,
    NanLossError,
    NonFiniteError,
    UnregisteredOpError,
)
from .evalsuite import embed_texts, pair_eval, probe_eval, sts_eval
from .gradcert import SCOPES, run_scope
from .trainer import PRESETS, TrainConfig, Trainer, preset_config

THREADS_ENV = "MIC_THREADS"


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(THREADS_ENV, f"must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(THREADS_ENV, f"must be a positive integer, got {raw!r}")
    return value


def _parse_dims(raw: str | None) -> tuple[int, ...] | None:
    if raw is None:
        return None
    try:
        dims = tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError:
        raise ConfigError("dims", f"expected comma-separated integers, got {raw!r}") from None
    if not dims:
        raise ConfigError("dims", "must name at least one width")
    return dims


@dataclass
class RunManifest:
    """Everything needed to reproduce one command invocation."""

    command: str
    seed: int
    config: dict
    inputs: dict[str, dict] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    package_version: str = __version__
    threads: int = 1

    def add_input(self, name: str, path: Path) -> None:
        self.inputs[name] = {"path": str(path), "sha256": _sha256(path)}

    def write(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


# -- gen-corpus ---------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    generators = {
        "clusters": lambda: gen_clusters(args.size, args.seed, n_classes=args.classes),
        "sts-graded": lambda: gen_sts_graded(args.size, args.seed),
        "pairs": lambda: gen_pairs(args.size, args.seed, n_classes=args.classes),
    }
    rows = generators[args.kind]()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tsv(out, rows)
    print(f"wrote {len(rows)} rows ({args.kind}, seed {args.seed}) to {out}")
    return 0


# -- train ---------------------------------------------------------------------


def _load_train_config(args) -> TrainConfig:
    base = preset_config(args.preset).to_dict()
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            try:
                overrides = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("config", f"{args.config} is not valid JSON: {exc}") from None
        if not isinstance(overrides, dict):
            raise ConfigError("config", "top level must be a JSON object")
        encoder_overrides = overrides.pop("encoder", None)
        base.update(overrides)
        if encoder_overrides is not None:
            if not isinstance(encoder_overrides, dict):
                raise ConfigError("encoder", "must be a JSON object")
            base["encoder"].update(encoder_overrides)
    if args.seed is not None:
        base["seed"] = args.seed
    if args.epochs is not None:
        base["epochs"] = args.epochs
    dims = _parse_dims(args.dims)
    if dims is not None:
        base["dims"] = list(dims)
    return TrainConfig.from_dict(base)


def cmd_train(args) -> int:
    out_dir = Path(args.out)
    corpus = Path(args.corpus)
    if args.resume:
        manifest_path = out_dir / "manifest.json"
        if not manifest_path.exists():
            raise ConfigError("resume", f"no manifest at {manifest_path}")
        with open(manifest_path, "r", encoding="utf-8") as fh:
            cfg = TrainConfig.from_dict(json.load(fh)["config"])
    else:
        cfg = _load_train_config(args)
    texts = read_train_texts(corpus)
    trainer = Trainer(cfg, texts)

    out_dir.mkdir(parents=True, exist_ok=True)
    if not args.resume:
        manifest = RunManifest(
            command="train", seed=cfg.seed, config=cfg.to_dict(), threads=_threads()
        )
        manifest.add_input("corpus", corpus)
        manifest.outputs = ["metrics.ndjson", "checkpoint.npz"]
        manifest.write(out_dir / "manifest.json")

    result = trainer.run(out_dir=out_dir, resume=args.resume, max_steps=args.max_steps)
    if result.metrics:
        last = result.metrics[-1]
        print(
            f"trained to step {result.global_step}/{result.total_steps}: "
            f"l_total={last.l_total:.6f} l_mrl={last.l_mrl:.6f} l_align={last.l_align:.6f}"
        )
    else:
        print(f"nothing to do: already at step {result.global_step}/{result.total_steps}")
    print(f"artifacts in {out_dir}")
    return 0


# -- diagnose --------------------------------------------------------------------


def cmd_diagnose(args) -> int:
    if (args.checkpoint is None) == (args.embeddings is None):
        raise ConfigError("input", "pass exactly one of --checkpoint or --embeddings")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dims = _parse_dims(args.dims)
    texts = None
    encoder = None
    train_cfg_raw = None

    if args.checkpoint is not None:
        if args.corpus is None:
            raise ConfigError("corpus", "--checkpoint diagnosis needs --corpus")
        encoder, _, header = TinyEncoder.load(args.checkpoint)
        train_cfg_raw = header.get("train_config")
        texts = read_train_texts(Path(args.corpus))
        emb = embed_texts(encoder, texts)
    else:
        emb = diag.load_embeddings(args.embeddings)

    d_full = emb.shape[1]
    if dims is None:
        if train_cfg_raw:
            dims = tuple(train_cfg_raw["dims"])
        else:
            dims = tuple(d for d in (4, 8, 16, 32) if d <= d_full) or (d_full,)

    profile = diag.variance_profile(emb, dims)
    with open(out_dir / "variance_profile.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dim", "variance"])
        for j, v in profile.to_rows():
            writer.writerow([j, repr(v)])

    summary: dict = {
        "dims": list(dims),
        "d_full": d_full,
        "n_rows": int(emb.shape[0]),
        "tau": args.tau,
        "variance_cv": {str(d): profile.cv(d) for d in dims},
        "cross_corr": {},
    }

    for d in dims:
        if not d < d_full:
            continue
        cmap = diag.cross_corr_map(emb, d, tau=args.tau)
        with open(out_dir / f"crosscorr_d{d}.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["u", "v", "value"])
            for u in range(cmap.d):
                for v in range(cmap.d_res):
                    writer.writerow([u, v, repr(float(cmap.c[u, v]))])
        summary["cross_corr"][str(d)] = {
            "mean_abs": cmap.mean_abs,
            "frac_above_tau": cmap.frac_above_tau,
            "excess_mass": cmap.excess_mass,
        }
        part = diag.covariance_partition(emb, d, seed=args.seed)
        summary.setdefault("covariance", {})[str(d)] = {
            "eig_min_pre": part.eig_min,
            "eig_max_pre": part.eig_max,
            "cross_fro": part.cross_fro,
        }

    unif = diag.uniformity_report(emb, dims, max_rows=args.max_rows, seed=args.seed)
    with open(out_dir / "uniformity.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dim", "uniformity", "cv"])
        for row in unif.rows:
            writer.writerow([row["dim"], repr(row["uniformity"]), repr(row["cv"])])
    summary["uniformity"] = {
        "rows": unif.rows,
        "n_rows": unif.n_rows,
        "subsampled": unif.subsampled,
        "seed": unif.seed,
    }

    if args.layer is not None:
        if encoder is None or texts is None:
            raise ConfigError("layer", "token-level maps need --checkpoint and --corpus")
        summary["token_cross_corr"] = {}
        for d in dims:
            if not d < d_full:
                continue
            cmap = diag.token_cross_corr(encoder, texts, args.layer, d, tau=args.tau)
            with open(
                out_dir / f"crosscorr_layer{args.layer}_d{d}.csv", "w", encoding="utf-8", newline=""
            ) as fh:
                writer = csv.writer(fh)
                writer.writerow(["u", "v", "value"])
                for u in range(cmap.d):
                    for v in range(cmap.d_res):
                        writer.writerow([u, v, repr(float(cmap.c[u, v]))])
            summary["token_cross_corr"][str(d)] = {
                "layer": args.layer,
                "mean_abs": cmap.mean_abs,
                "frac_above_tau": cmap.frac_above_tau,
                "excess_mass": cmap.excess_mass,
            }

    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"diagnostics for {emb.shape[0]} x {d_full} embeddings written to {out_dir}")
    return 0


# -- gradcheck --------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    report = run_scope(
        args.scope,
        seeds=tuple(range(args.seed, args.seed + 3)),
        h=args.h,
        tol=args.tol,
        max_coords=args.max_coords,
    )
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
    for run in report.runs:
        status = "ok" if run.report.passed(args.tol) else "FAIL"
        print(
            f"{status:4s} {run.scenario:14s} seed={run.seed} "
            f"max_rel={run.report.max_rel:.3e} checked={run.report.n_checked} "
            f"excluded={run.report.n_excluded}"
        )
    if not report.passed():
        scenario, seed, param, max_rel = report.worst()
        bad = next(r for r in report.runs if r.scenario == scenario and r.seed == seed)
        print(
            f"gradient certification FAILED: {scenario} (seed {seed}) param '{param}' "
            f"max_rel={max_rel:.3e} exceeds tol={args.tol:g}; ops in graph: "
            f"{', '.join(bad.report.ops)}"
        )
        return 1
    print(f"gradient certification passed: max_rel={report.max_rel:.3e} (tol {args.tol:g})")
    return 0


# -- eval -------------------------------------------------------------------------


def cmd_eval(args) -> int:
    encoder, _, header = TinyEncoder.load(args.checkpoint)
    dims = _parse_dims(args.dims)
    if dims is None:
        train_cfg = header.get("train_config")
        dims = tuple(train_cfg["dims"]) if train_cfg else (encoder.config.d_full,)
    dataset = Path(args.dataset)
    if args.task == "sts":
        report = sts_eval(encoder, read_sts(dataset), dims, seed=args.seed)
    elif args.task == "pairs":
        report = pair_eval(encoder, read_pairs(dataset), dims, seed=args.seed)
    else:
        report = probe_eval(encoder, read_labeled(dataset), dims, seed=args.seed)
    report.write(args.out)
    for row in report.rows:
        shown = "flagged" if row.value is None else f"{row.value:.6f}"
        print(f"{report.task} d={row.dim}: {report.metric}={shown}")
    print(f"report written to {args.out}")
    return 0


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mic",
        description="Matryoshka contrastive training with collapse and isotropy regularizers.",
    )
    parser.add_argument("--version", action="version", version=f"mic {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a synthetic TSV corpus")
    p.add_argument("--kind", required=True, choices=("clusters", "sts-graded", "pairs"))
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train an encoder on a TSV corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default="mic", choices=sorted(PRESETS))
    p.add_argument("--config", default=None, help="JSON file overriding preset fields")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--dims", default=None, help="comma-separated truncation widths")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--resume", action="store_true", help="continue a run in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("diagnose", help="embedding-geometry reports (CSV + JSON)")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--embeddings", default=None, help="embedding file from save_embeddings")
    p.add_argument("--corpus", default=None)
    p.add_argument("--dims", default=None)
    p.add_argument("--layer", type=int, default=None, help="also map token-level correlations here")
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--max-rows", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("gradcheck", help="certify gradients against finite differences")
    p.add_argument("--scope", required=True, choices=SCOPES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=24)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="run a downstream task from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, choices=("sts", "pairs", "probe"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--dims", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _threads()
        return args.func(args)
    except (NanLossError, DeterminismError, NonFiniteError, UnregisteredOpError) as exc:
        # Failed runtime checks, as opposed to bad invocations.
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except MicError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
