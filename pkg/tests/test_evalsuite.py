import json

import numpy as np
import pytest

import oracles
from mic.data import LabeledExample, PairExample, gen_clusters, gen_pairs, gen_sts_graded
from mic.encoder import EncoderConfig, TinyEncoder
from mic.errors import ContractError, DatasetError, UndefinedCorrelationError
from mic.evalsuite import (
    EvalReport,
    average_ranks,
    best_threshold_accuracy,
    embed_texts,
    macro_f1,
    pair_eval,
    probe_eval,
    spearman,
    stratified_split,
    sts_eval,
    train_probe,
)

ENC = EncoderConfig(vocab_size=120, d_full=8, n_layers=2, n_heads=2, ff_multiplier=2, max_len=12)


class TestAverageRanks:
    def test_no_ties(self):
        np.testing.assert_array_equal(average_ranks([30.0, 10.0, 20.0]), [3.0, 1.0, 2.0])

    def test_ties_averaged(self):
        np.testing.assert_array_equal(average_ranks([1.0, 2.0, 2.0, 3.0]), [1.0, 2.5, 2.5, 4.0])
        np.testing.assert_array_equal(average_ranks([5.0, 5.0, 5.0]), [2.0, 2.0, 2.0])


class TestSpearman:
    def test_exact_on_permutations(self, rng):
        # Rank statistics of distinct values are small integers, so the
        # vectorized path and the plain-loop oracle agree bit for bit.
        for _ in range(100):
            n = int(rng.integers(3, 40))
            x = rng.permutation(n).astype(float)
            y = rng.permutation(n).astype(float)
            assert spearman(x, y) == oracles.spearman(x, y)

    def test_exact_with_ties(self, rng):
        for _ in range(50):
            n = int(rng.integers(3, 30))
            x = rng.integers(0, 5, size=n).astype(float)
            y = rng.integers(0, 5, size=n).astype(float)
            if len(set(x)) < 2 or len(set(y)) < 2:
                continue
            assert spearman(x, y) == pytest.approx(oracles.spearman(x, y), abs=1e-14)

    def test_perfect_and_inverse(self):
        assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
        assert spearman([1, 2, 3, 4], [8, 6, 4, 2]) == -1.0

    def test_monotone_transform_invariance(self, rng):
        x = rng.normal(size=20)
        y = rng.normal(size=20)
        assert spearman(x, y) == spearman(np.exp(x), y)

    def test_constant_input_rejected(self):
        with pytest.raises(UndefinedCorrelationError):
            spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_shape_errors(self):
        with pytest.raises(ContractError):
            spearman([1.0, 2.0], [1.0, 2.0, 3.0])
        with pytest.raises(ContractError):
            spearman([1.0], [2.0])


class TestBestThresholdAccuracy:
    def test_matches_brute_force(self, rng):
        for _ in range(60):
            n = int(rng.integers(2, 51))
            sims = rng.normal(size=n)
            if rng.random() < 0.5:
                sims = np.round(sims, 1)  # force ties
            labels = rng.integers(0, 2, size=n)
            got_acc, got_t = best_threshold_accuracy(sims, labels)
            want_acc, want_t = oracles.best_threshold_accuracy(sims.tolist(), labels.tolist())
            assert got_acc == want_acc
            assert got_t == want_t

    def test_separable(self):
        acc, t = best_threshold_accuracy(np.array([0.9, 0.8, 0.1, 0.2]), np.array([1, 1, 0, 0]))
        assert acc == 1.0
        assert 0.2 < t < 0.8

    def test_all_same_label(self):
        acc, _ = best_threshold_accuracy(np.array([0.3, 0.7]), np.array([1, 1]))
        assert acc == 1.0

    def test_tie_prefers_smallest_threshold(self):
        # Both sentinels reach accuracy 0.5; the sweep must return the low one.
        sims = np.array([0.4, 0.6])
        labels = np.array([1, 0])
        _, t = best_threshold_accuracy(sims, labels)
        assert t == pytest.approx(0.4 - 1.0)


class TestEmbedTexts:
    def test_matches_forward(self, rng):
        enc = TinyEncoder(ENC)
        texts = [ex.text for ex in gen_clusters(10, seed=0)]
        emb = embed_texts(enc, texts, batch_size=4)
        assert emb.shape == (10, ENC.d_full)
        single = embed_texts(enc, texts[3:4])
        np.testing.assert_allclose(emb[3], single[0], rtol=1e-12)

    def test_eval_mode_no_dropout_noise(self):
        enc = TinyEncoder(ENC)
        texts = ["a b c", "d e f"]
        np.testing.assert_array_equal(embed_texts(enc, texts), embed_texts(enc, texts))


class TestEvalReports:
    def test_sts_eval_runs_and_sorts_dims(self):
        enc = TinyEncoder(ENC)
        examples = gen_sts_graded(30, seed=0)
        report = sts_eval(enc, examples, dims=(8, 4))
        assert [r.dim for r in report.rows] == [4, 8]
        for r in report.rows:
            assert r.value is None or -1.0 <= r.value <= 1.0

    def test_sts_eval_needs_pairs(self):
        enc = TinyEncoder(ENC)
        with pytest.raises(DatasetError):
            sts_eval(enc, gen_sts_graded(2, seed=0)[:1], dims=(4,))

    def test_pair_eval_matches_brute_force(self):
        enc = TinyEncoder(ENC)
        examples = gen_pairs(24, seed=1)
        report = pair_eval(enc, examples, dims=(4, 8))
        emb_a = embed_texts(enc, [e.text_a for e in examples])
        emb_b = embed_texts(enc, [e.text_b for e in examples])
        labels = [e.label for e in examples]
        for row in report.rows:
            a = emb_a[:, : row.dim]
            b = emb_b[:, : row.dim]
            na = np.maximum(np.linalg.norm(a, axis=1), 1e-5)
            nb = np.maximum(np.linalg.norm(b, axis=1), 1e-5)
            sims = (a * b).sum(axis=1) / (na * nb)
            want_acc, want_t = oracles.best_threshold_accuracy(sims.tolist(), labels)
            assert row.value == want_acc
            assert row.threshold == want_t

    def test_pair_eval_needs_both_labels(self):
        enc = TinyEncoder(ENC)
        rows = [PairExample("a b", "a b", 1), PairExample("c d", "c e", 1)]
        with pytest.raises(DatasetError):
            pair_eval(enc, rows, dims=(4,))

    def test_report_write(self, tmp_path):
        enc = TinyEncoder(ENC)
        report = sts_eval(enc, gen_sts_graded(12, seed=0), dims=(4, 8))
        report.write(tmp_path)
        blob = json.loads((tmp_path / "eval_report.json").read_text())
        assert blob["task"] == "sts"
        assert len(blob["rows"]) == 2
        csv_lines = (tmp_path / "eval_report.csv").read_text().strip().splitlines()
        assert len(csv_lines) == 3  # header + 2 dims
        assert report.value_at(4) == blob["rows"][0]["value"]


class TestProbe:
    def test_probe_separates_linear_data(self, rng):
        # Linearly separable clouds: the probe must be near perfect.
        n = 60
        x = np.concatenate([rng.normal(size=(n, 4)) + 4.0, rng.normal(size=(n, 4)) - 4.0])
        y = np.array([0] * n + [1] * n)
        w, b = train_probe(x, y, n_classes=2)
        pred = (x @ w + b).argmax(axis=1)
        assert macro_f1(y, pred) >= 0.99

    def test_macro_f1_perfect_and_worst(self):
        y = np.array([0, 0, 1, 1])
        assert macro_f1(y, y.copy()) == 1.0
        assert macro_f1(y, 1 - y) == 0.0

    def test_stratified_split_covers_classes(self):
        labels = np.array([0] * 10 + [1] * 5 + [2] * 5)
        train, test = stratified_split(labels, seed=0)
        assert set(labels[train]) == {0, 1, 2}
        assert set(labels[test]) == {0, 1, 2}
        assert len(set(train) & set(test)) == 0
        assert len(train) + len(test) == len(labels)

    def test_stratified_split_deterministic(self):
        labels = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2, 2])
        a = stratified_split(labels, seed=3)
        b = stratified_split(labels, seed=3)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_split_rejects_singleton_class(self):
        with pytest.raises(DatasetError):
            stratified_split(np.array([0, 0, 1]), seed=0)

    def test_probe_eval_runs(self):
        enc = TinyEncoder(ENC)
        examples = gen_clusters(40, seed=2, n_classes=4)
        report = probe_eval(enc, examples, dims=(4, 8))
        assert [r.dim for r in report.rows] == [4, 8]
        for r in report.rows:
            assert 0.0 <= r.value <= 1.0

    def test_probe_eval_needs_two_classes(self):
        enc = TinyEncoder(ENC)
        rows = [LabeledExample("a b", 0), LabeledExample("c d", 0)]
        with pytest.raises(DatasetError):
            probe_eval(enc, rows, dims=(4,))
