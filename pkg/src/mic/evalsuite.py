"""Downstream evaluation: similarity ranking, pair classification, probing.

Each task consumes a frozen encoder, truncates pooled embeddings to a
ladder of widths, and reports one number per width. Rank correlation is
implemented from first principles (average ranks, Pearson on ranks) so
its exactness is testable against a brute-force oracle.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .data import LabeledExample, PairExample, StsExample, encode_batch
from .encoder import TinyEncoder
from .errors import ContractError, DatasetError, UndefinedCorrelationError
from .seeding import derive_seed


def average_ranks(values) -> np.ndarray:
    """1-based ranks with ties averaged."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Rank correlation with average-rank tie handling.

    Raises on constant inputs, where the coefficient is undefined.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError(f"spearman expects equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ContractError(f"spearman needs at least 2 points, got {len(x)}")
    rx = average_ranks(x)
    ry = average_ranks(y)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    sxx = float((dx * dx).sum())
    syy = float((dy * dy).sum())
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("rank correlation undefined for constant input")
    return float((dx * dy).sum() / math.sqrt(sxx * syy))


# -- embedding extraction --------------------------------------------------------


def embed_texts(encoder: TinyEncoder, texts: list[str], batch_size: int = 64) -> np.ndarray:
    """Pooled embeddings in eval mode (no dropout), row per text."""
    cfg = encoder.config
    chunks = []
    with ag.no_grad():
        for start in range(0, len(texts), batch_size):
            tokens, mask = encode_batch(texts[start : start + batch_size], cfg.vocab_size, cfg.max_len)
            chunks.append(encoder.forward(tokens, mask, train_mode=False).pooled.data)
    return np.concatenate(chunks, axis=0)


def _cosine_rows(a: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    na = np.maximum(np.linalg.norm(a, axis=1), eps)
    nb = np.maximum(np.linalg.norm(b, axis=1), eps)
    return (a * b).sum(axis=1) / (na * nb)


# -- reports ---------------------------------------------------------------------


@dataclass
class EvalRow:
    dim: int
    value: float | None
    flagged: bool = False
    threshold: float | None = None

    def to_dict(self) -> dict:
        out = {"dim": self.dim, "value": self.value, "flagged": self.flagged}
        if self.threshold is not None:
            out["threshold"] = self.threshold
        return out


@dataclass
class EvalReport:
    task: str
    metric: str
    seed: int
    rows: list[EvalRow] = field(default_factory=list)

    def value_at(self, dim: int) -> float | None:
        for row in self.rows:
            if row.dim == dim:
                return row.value
        raise ContractError(f"no row for dim {dim} in {self.task} report")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "metric": self.metric,
            "seed": self.seed,
            "rows": [r.to_dict() for r in self.rows],
        }

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "eval_report.json", "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(out_dir / "eval_report.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dim", self.metric, "flagged"])
            for row in self.rows:
                writer.writerow([row.dim, "" if row.value is None else repr(row.value), int(row.flagged)])


# -- tasks ------------------------------------------------------------------------


def sts_eval(
    encoder: TinyEncoder, examples: list[StsExample], dims: tuple[int, ...], seed: int = 0
) -> EvalReport:
    """Spearman between truncated-cosine similarity and gold scores."""
    if len(examples) < 2:
        raise DatasetError(f"sts_eval needs at least 2 pairs, got {len(examples)}")
    emb_a = embed_texts(encoder, [e.text_a for e in examples])
    emb_b = embed_texts(encoder, [e.text_b for e in examples])
    gold = np.array([e.score for e in examples], dtype=np.float64)
    report = EvalReport(task="sts", metric="spearman", seed=seed)
    for d in sorted(dims):
        sims = _cosine_rows(emb_a[:, :d], emb_b[:, :d])
        try:
            report.rows.append(EvalRow(dim=d, value=spearman(sims, gold)))
        except UndefinedCorrelationError:
            report.rows.append(EvalRow(dim=d, value=None, flagged=True))
    return report


def best_threshold_accuracy(sims: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Best accuracy of the rule (sim >= threshold -> 1) over a sweep.

    Candidates are the midpoints between distinct consecutive sorted
    similarities plus one sentinel on each side. Ties in accuracy go to
    the smallest threshold.
    """
    sims = np.asarray(sims, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(sims)
    order = np.argsort(sims, kind="stable")
    s = sims[order]
    l = labels[order]
    # zeros_before[k]: correct rejections if the first k points predict 0
    zeros_before = np.concatenate([[0], np.cumsum(l == 0)])
    ones_after = np.concatenate([np.cumsum((l == 1)[::-1])[::-1], [0]])
    best_acc = -1.0
    best_thresh = 0.0
    for k in range(n + 1):
        if 0 < k < n and s[k - 1] == s[k]:
            continue
        if k == 0:
            thresh = s[0] - 1.0
        elif k == n:
            thresh = s[n - 1] + 1.0
        else:
            thresh = (s[k - 1] + s[k]) / 2.0
        acc = (int(zeros_before[k]) + int(ones_after[k])) / n
        if acc > best_acc:
            best_acc = acc
            best_thresh = thresh
    return best_acc, best_thresh


def pair_eval(
    encoder: TinyEncoder, examples: list[PairExample], dims: tuple[int, ...], seed: int = 0
) -> EvalReport:
    """Best threshold accuracy for binary similarity classification."""
    labels = np.array([e.label for e in examples], dtype=np.int64)
    if len(examples) < 2 or len(set(labels.tolist())) < 2:
        raise DatasetError("pair_eval needs both labels present")
    emb_a = embed_texts(encoder, [e.text_a for e in examples])
    emb_b = embed_texts(encoder, [e.text_b for e in examples])
    report = EvalReport(task="pairs", metric="accuracy", seed=seed)
    for d in sorted(dims):
        sims = _cosine_rows(emb_a[:, :d], emb_b[:, :d])
        acc, thresh = best_threshold_accuracy(sims, labels)
        report.rows.append(EvalRow(dim=d, value=acc, threshold=thresh))
    return report


# -- linear probe -------------------------------------------------------------------


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def train_probe(
    x: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    epochs: int = 200,
    lr: float = 0.1,
    l2: float = 1e-4,
) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch softmax regression from zero init; fixed recipe."""
    n, d = x.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    for _ in range(epochs):
        probs = _softmax_rows(x @ w + b)
        g_logits = (probs - onehot) / n
        w -= lr * (x.T @ g_logits + l2 * w)
        b -= lr * g_logits.sum(axis=0)
    return w, b


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Unweighted mean F1 over the classes present in y_true."""
    scores = []
    for cls in sorted(set(y_true.tolist())):
        tp = int(((y_pred == cls) & (y_true == cls)).sum())
        fp = int(((y_pred == cls) & (y_true != cls)).sum())
        fn = int(((y_pred != cls) & (y_true == cls)).sum())
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(scores))


def stratified_split(labels: np.ndarray, seed: int, test_frac: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Seeded per-class 80/20 split; every class must reach both sides."""
    rng = np.random.default_rng(derive_seed(seed, "probe-split"))
    train_idx: list[int] = []
    test_idx: list[int] = []
    for cls in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < 2:
            raise DatasetError(f"class {cls} has fewer than 2 examples; cannot split")
        idx = rng.permutation(idx)
        n_test = max(1, int(round(len(idx) * test_frac)))
        if n_test >= len(idx):
            n_test = len(idx) - 1
        test_idx.extend(idx[:n_test].tolist())
        train_idx.extend(idx[n_test:].tolist())
    return np.array(sorted(train_idx)), np.array(sorted(test_idx))


def probe_eval(
    encoder: TinyEncoder,
    examples: list[LabeledExample],
    dims: tuple[int, ...],
    seed: int = 0,
) -> EvalReport:
    """Macro-F1 of a frozen-feature linear probe per truncation width."""
    labels = np.array([e.label for e in examples], dtype=np.int64)
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise DatasetError("probe_eval needs at least 2 classes")
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[int(v)] for v in labels], dtype=np.int64)
    emb = embed_texts(encoder, [e.text for e in examples])
    train_idx, test_idx = stratified_split(y, seed)
    report = EvalReport(task="probe", metric="macro_f1", seed=seed)
    for d in sorted(dims):
        x = emb[:, :d]
        w, b = train_probe(x[train_idx], y[train_idx], n_classes=len(classes))
        pred = (x[test_idx] @ w + b).argmax(axis=1)
        report.rows.append(EvalRow(dim=d, value=macro_f1(y[test_idx], pred)))
    return report
