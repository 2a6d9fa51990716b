import numpy as np
import pytest

import oracles
from mic.data import (
    PAD_ID,
    LabeledExample,
    PairExample,
    StsExample,
    encode_batch,
    gen_clusters,
    gen_pairs,
    gen_sts_graded,
    hash_token,
    read_labeled,
    read_pairs,
    read_sts,
    read_train_texts,
    tokenize,
    write_tsv,
)
from mic.errors import DatasetError


class TestTokenization:
    def test_hash_is_stable_and_in_range(self):
        got = [hash_token(w, 100) for w in ("alpha", "beta", "alpha")]
        assert got[0] == got[2]
        assert all(1 <= t < 100 for t in got)
        # Frozen values: the bucketing must never drift across releases,
        # or checkpoints stop matching their corpora.
        assert hash_token("alpha", 1000) == 222
        assert hash_token("w0", 1000) == 234

    def test_pad_bucket_reserved(self):
        ids = [hash_token(f"w{i}", 50) for i in range(500)]
        assert PAD_ID not in ids

    def test_tokenize_truncates(self):
        assert len(tokenize("a b c d e", 100, 3)) == 3

    def test_tokenize_empty_rejected(self):
        with pytest.raises(DatasetError):
            tokenize("   ", 100, 8)

    def test_encode_batch_shapes_and_mask(self):
        tokens, mask = encode_batch(["a b c", "d"], 100, 8)
        assert tokens.shape == (2, 3)
        assert tokens.dtype == np.int64
        np.testing.assert_array_equal(mask.flags, [[1, 1, 1], [1, 0, 0]])
        assert tokens[1, 1] == PAD_ID

    def test_encode_batch_empty_rejected(self):
        with pytest.raises(DatasetError):
            encode_batch([], 100, 8)


class TestGenerators:
    def test_clusters_deterministic(self):
        assert gen_clusters(20, seed=3) == gen_clusters(20, seed=3)
        assert gen_clusters(20, seed=3) != gen_clusters(20, seed=4)

    def test_clusters_balanced_labels(self):
        rows = gen_clusters(32, seed=0, n_classes=8)
        counts = np.bincount([r.label for r in rows], minlength=8)
        assert set(counts.tolist()) == {4}

    def test_clusters_class_tokens_disjoint(self):
        # Two classes never share class-pool words (shared pool aside).
        rows = gen_clusters(64, seed=1, n_classes=4, shared_tokens=8, tokens_per_class=6)
        by_label: dict[int, set[str]] = {}
        for r in rows:
            specific = {w for w in r.text.split() if int(w[1:]) >= 8}
            by_label.setdefault(r.label, set()).update(specific)
        labels = sorted(by_label)
        for a in labels:
            for b in labels:
                if a < b:
                    assert not (by_label[a] & by_label[b])

    def test_clusters_length_bounds(self):
        rows = gen_clusters(50, seed=2, min_len=4, max_len=12)
        lengths = [len(r.text.split()) for r in rows]
        assert min(lengths) >= 4 and max(lengths) <= 12

    def test_sts_scores_track_overlap(self):
        # Token overlap is built to rise with the score; Spearman between
        # score and Jaccard overlap over a decent sample must be strong.
        rows = gen_sts_graded(200, seed=0)
        overlaps, scores = [], []
        for r in rows:
            a, b = set(r.text_a.split()), set(r.text_b.split())
            overlaps.append(len(a & b) / len(a | b))
            scores.append(r.score)
        assert oracles.spearman(scores, overlaps) > 0.9

    def test_sts_score_range_and_grades(self):
        rows = gen_sts_graded(25, seed=1)
        scores = {r.score for r in rows}
        assert scores == {0.0, 1.25, 2.5, 3.75, 5.0}

    def test_sts_zero_grade_is_disjoint(self):
        rows = [r for r in gen_sts_graded(25, seed=2) if r.score == 0.0]
        for r in rows:
            assert not (set(r.text_a.split()) & set(r.text_b.split()))

    def test_pairs_alternate_labels(self):
        rows = gen_pairs(30, seed=0)
        assert [r.label for r in rows[:6]] == [1, 0, 1, 0, 1, 0]

    def test_generators_reject_tiny_sizes(self):
        for gen in (gen_clusters, gen_sts_graded, gen_pairs):
            with pytest.raises(DatasetError):
                gen(1, seed=0)


class TestTsvIo:
    def test_labeled_roundtrip(self, tmp_path):
        rows = gen_clusters(10, seed=0)
        path = tmp_path / "c.tsv"
        write_tsv(path, rows)
        assert read_labeled(path) == rows

    def test_sts_roundtrip(self, tmp_path):
        rows = gen_sts_graded(10, seed=0)
        path = tmp_path / "s.tsv"
        write_tsv(path, rows)
        assert read_sts(path) == rows

    def test_pairs_roundtrip(self, tmp_path):
        rows = gen_pairs(10, seed=0)
        path = tmp_path / "p.tsv"
        write_tsv(path, rows)
        assert read_pairs(path) == rows

    def test_unsupported_row_type(self, tmp_path):
        with pytest.raises(DatasetError):
            write_tsv(tmp_path / "x.tsv", [{"not": "a dataclass"}])

    def test_error_carries_line_number(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("good text\t1\nbad row with no tab\n", encoding="utf-8")
        with pytest.raises(DatasetError, match=r":2:"):
            read_labeled(path)

    def test_non_integer_label(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("text\tx\n", encoding="utf-8")
        with pytest.raises(DatasetError, match=r":1:.*not an integer"):
            read_labeled(path)

    def test_non_numeric_score(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("a\tb\thigh\n", encoding="utf-8")
        with pytest.raises(DatasetError, match=r":1:.*not a number"):
            read_sts(path)

    def test_pair_label_must_be_binary(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("a\tb\t2\n", encoding="utf-8")
        with pytest.raises(DatasetError, match=r"must be 0 or 1"):
            read_pairs(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.tsv"
        path.write_text("", encoding="utf-8")
        with pytest.raises(DatasetError):
            read_labeled(path)

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "gaps.tsv"
        path.write_text("a\t0\n\nb\t1\n", encoding="utf-8")
        rows = read_labeled(path)
        assert [r.label for r in rows] == [0, 1]

    def test_empty_text_column_rejected(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text(" \t1\n", encoding="utf-8")
        with pytest.raises(DatasetError, match=r"empty text"):
            read_labeled(path)


class TestReadTrainTexts:
    def test_two_column_file(self, tmp_path):
        path = tmp_path / "c.tsv"
        write_tsv(path, [LabeledExample("one two", 0), LabeledExample("three", 1)])
        assert read_train_texts(path) == ["one two", "three"]

    def test_three_column_file_uses_both_texts(self, tmp_path):
        path = tmp_path / "p.tsv"
        write_tsv(path, [PairExample("a b", "c d", 1), StsExample("e", "f", 2.5)])
        assert read_train_texts(path) == ["a b", "c d", "e", "f"]

    def test_wrong_width_rejected(self, tmp_path):
        path = tmp_path / "w.tsv"
        path.write_text("a\tb\tc\td\n", encoding="utf-8")
        with pytest.raises(DatasetError):
            read_train_texts(path)
