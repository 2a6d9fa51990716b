"""Tokenization, synthetic corpus generators, and TSV dataset IO.

Tokenization is whitespace splitting followed by stable hash bucketing,
so no vocabulary file is needed and the same word always lands in the
same bucket regardless of process or platform. Bucket 0 is reserved for
padding.

Three synthetic corpus kinds cover the eval tasks: topic clusters for
classification and retrieval-style contrastive training, graded-overlap
sentence pairs with similarity scores, and same-topic/other-topic pairs
with binary labels.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import DatasetError
from .tensor_core import SequenceMask

PAD_ID = 0


@dataclass(frozen=True)
class StsExample:
    text_a: str
    text_b: str
    score: float


@dataclass(frozen=True)
class PairExample:
    text_a: str
    text_b: str
    label: int


@dataclass(frozen=True)
class LabeledExample:
    text: str
    label: int


# -- tokenization --------------------------------------------------------------


def hash_token(word: str, vocab_size: int) -> int:
    """Stable bucket id in [1, vocab_size) for one word."""
    digest = hashlib.md5(word.encode("utf-8")).digest()
    return 1 + int.from_bytes(digest[:8], "little") % (vocab_size - 1)


def tokenize(text: str, vocab_size: int, max_len: int) -> list[int]:
    words = text.split()
    if not words:
        raise DatasetError("cannot tokenize an empty text")
    return [hash_token(w, vocab_size) for w in words[:max_len]]


def encode_batch(
    texts: list[str], vocab_size: int, max_len: int
) -> tuple[np.ndarray, SequenceMask]:
    """Tokenize and pad a batch. Returns (tokens, mask)."""
    if not texts:
        raise DatasetError("cannot encode an empty batch")
    ids = [tokenize(t, vocab_size, max_len) for t in texts]
    width = max(len(seq) for seq in ids)
    tokens = np.full((len(ids), width), PAD_ID, dtype=np.int64)
    flags = np.zeros((len(ids), width), dtype=np.float64)
    for i, seq in enumerate(ids):
        tokens[i, : len(seq)] = seq
        flags[i, : len(seq)] = 1.0
    return tokens, SequenceMask(flags)


# -- synthetic corpora -----------------------------------------------------------


def _words(ids) -> str:
    return " ".join(f"w{int(t)}" for t in ids)


def gen_clusters(
    size: int,
    seed: int,
    n_classes: int = 8,
    tokens_per_class: int = 20,
    shared_tokens: int = 4,
    min_len: int = 4,
    max_len: int = 12,
) -> list[LabeledExample]:
    """Topic-cluster sentences: each class owns a token pool, plus a
    shared pool that adds overlap noise. Labels cycle so classes stay
    balanced for any size.

    The default composition keeps the shared pool small: cleanly
    separated topics make contrastive training concentrate embeddings
    hard enough that its side effects (cross-dimension correlation,
    variance collapse) show up within a few hundred steps, which is
    what the trend-level regression tests rely on."""
    if size < 2:
        raise DatasetError(f"corpus size must be >= 2, got {size}")
    rng = np.random.default_rng(seed)
    shared = np.arange(shared_tokens)
    rows = []
    for i in range(size):
        label = i % n_classes
        pool = shared_tokens + label * tokens_per_class + np.arange(tokens_per_class)
        length = int(rng.integers(min_len, max_len + 1))
        from_class = rng.random(length) < 0.8
        ids = np.where(from_class, rng.choice(pool, size=length), rng.choice(shared, size=length))
        rows.append(LabeledExample(text=_words(ids), label=label))
    return rows


def gen_sts_graded(
    size: int,
    seed: int,
    base_len: int = 8,
    base_pool: int = 400,
    noise_pool_offset: int = 400,
    noise_pool: int = 400,
) -> list[StsExample]:
    """Sentence pairs with graded token overlap and a 0..5 score.

    The second sentence keeps a grade-dependent fraction of the first
    sentence's tokens and replaces the rest from a disjoint pool, so
    token overlap is monotone in the score by construction.
    """
    if size < 2:
        raise DatasetError(f"corpus size must be >= 2, got {size}")
    rng = np.random.default_rng(seed)
    grades = np.arange(5)
    rows = []
    for i in range(size):
        grade = int(grades[i % len(grades)])
        base = rng.choice(base_pool, size=base_len, replace=False)
        keep = round(base_len * grade / 4)
        replaced = rng.choice(noise_pool, size=base_len - keep, replace=False) + noise_pool_offset
        partner = np.concatenate([base[:keep], replaced])
        rows.append(StsExample(text_a=_words(base), text_b=_words(partner), score=grade * 5.0 / 4.0))
    return rows


def gen_pairs(
    size: int,
    seed: int,
    n_classes: int = 8,
    tokens_per_class: int = 20,
    shared_tokens: int = 4,
    min_len: int = 4,
    max_len: int = 12,
) -> list[PairExample]:
    """Same-topic (label 1) and cross-topic (label 0) sentence pairs,
    alternating so both labels are always present."""
    if size < 2:
        raise DatasetError(f"corpus size must be >= 2, got {size}")
    rng = np.random.default_rng(seed)
    shared = np.arange(shared_tokens)

    def sentence(label: int) -> str:
        pool = shared_tokens + label * tokens_per_class + np.arange(tokens_per_class)
        length = int(rng.integers(min_len, max_len + 1))
        from_class = rng.random(length) < 0.8
        ids = np.where(from_class, rng.choice(pool, size=length), rng.choice(shared, size=length))
        return _words(ids)

    rows = []
    for i in range(size):
        cls_a = int(rng.integers(n_classes))
        if i % 2 == 0:
            rows.append(PairExample(sentence(cls_a), sentence(cls_a), 1))
        else:
            cls_b = int((cls_a + 1 + rng.integers(n_classes - 1)) % n_classes)
            rows.append(PairExample(sentence(cls_a), sentence(cls_b), 0))
    return rows


# -- TSV IO ---------------------------------------------------------------------


def write_tsv(path, rows) -> None:
    """Write dataclass rows as TSV, one column per field, no header."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            if isinstance(row, LabeledExample):
                fh.write(f"{row.text}\t{row.label}\n")
            elif isinstance(row, StsExample):
                fh.write(f"{row.text_a}\t{row.text_b}\t{row.score}\n")
            elif isinstance(row, PairExample):
                fh.write(f"{row.text_a}\t{row.text_b}\t{row.label}\n")
            else:
                raise DatasetError(f"unsupported row type {type(row).__name__}")


def _read_rows(path, n_cols: int) -> list[tuple[list[str], int]]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != n_cols:
                raise DatasetError(f"{path}:{lineno}: expected {n_cols} columns, got {len(cols)}")
            if any(not c.strip() for c in cols[: n_cols - 1]):
                raise DatasetError(f"{path}:{lineno}: empty text column")
            rows.append((cols, lineno))
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    return rows


def read_labeled(path) -> list[LabeledExample]:
    out = []
    for cols, lineno in _read_rows(path, 2):
        try:
            label = int(cols[1])
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: label {cols[1]!r} is not an integer") from None
        out.append(LabeledExample(text=cols[0], label=label))
    return out


def read_sts(path) -> list[StsExample]:
    out = []
    for cols, lineno in _read_rows(path, 3):
        try:
            score = float(cols[2])
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: score {cols[2]!r} is not a number") from None
        out.append(StsExample(text_a=cols[0], text_b=cols[1], score=score))
    return out


def read_pairs(path) -> list[PairExample]:
    out = []
    for cols, lineno in _read_rows(path, 3):
        if cols[2] not in ("0", "1"):
            raise DatasetError(f"{path}:{lineno}: pair label {cols[2]!r} must be 0 or 1")
        out.append(PairExample(text_a=cols[0], text_b=cols[1], label=int(cols[2])))
    return out


def read_train_texts(path) -> list[str]:
    """Flatten any supported TSV into individual training sentences.

    Two columns means (text, label); three means (text_a, text_b,
    score_or_label) and both texts are used.
    """
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
    if not first:
        raise DatasetError(f"{path}: empty file")
    n_cols = len(first.split("\t"))
    if n_cols == 2:
        return [row.text for row in read_labeled(path)]
    if n_cols == 3:
        texts: list[str] = []
        for cols, _ in _read_rows(path, 3):
            texts.extend(cols[:2])
        return texts
    raise DatasetError(f"{path}: expected 2 or 3 tab-separated columns, got {n_cols}")
