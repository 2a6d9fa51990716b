import numpy as np
import pytest

from mic import autograd as ag
from mic.encoder import EncoderConfig, LayerSelection, TinyEncoder
from mic.errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DegenerateSequenceError,
    InvalidDimensionError,
    VocabError,
)
from mic.tensor_core import SequenceMask

SMALL = EncoderConfig(vocab_size=40, d_full=8, n_layers=2, n_heads=2, ff_multiplier=2, max_len=6)


def batch(rng, cfg=SMALL, b=3, length=5):
    tokens = rng.integers(1, cfg.vocab_size, size=(b, length))
    mask = np.ones((b, length), dtype=int)
    mask[0, -2:] = 0
    tokens[0, -2:] = 0
    return tokens, SequenceMask(mask)


class TestConfig:
    def test_field_level_errors(self):
        cases = {
            "vocab_size": EncoderConfig(vocab_size=1),
            "d_full": EncoderConfig(d_full=1),
            "n_layers": EncoderConfig(n_layers=0),
            "n_heads": EncoderConfig(d_full=32, n_heads=5),
            "ff_multiplier": EncoderConfig(ff_multiplier=0),
            "dropout_rate": EncoderConfig(dropout_rate=1.0),
            "max_len": EncoderConfig(max_len=0),
            "dtype": EncoderConfig(dtype="float16"),
        }
        for field, cfg in cases.items():
            with pytest.raises(ConfigError) as err:
                cfg.validate()
            assert err.value.field == field

    def test_layer_selection(self):
        LayerSelection((0, 2)).validate(4)
        with pytest.raises(ConfigError):
            LayerSelection(()).validate(4)
        with pytest.raises(ConfigError):
            LayerSelection((0, 4)).validate(4)
        with pytest.raises(ConfigError):
            LayerSelection((2, 1)).validate(4)
        with pytest.raises(ConfigError):
            LayerSelection((1, 1)).validate(4)


class TestForward:
    def test_shapes(self, rng):
        enc = TinyEncoder(SMALL)
        tokens, mask = batch(rng)
        trace = enc.forward(tokens, mask)
        assert len(trace.layers) == SMALL.n_layers
        for h in trace.layers:
            assert h.shape == (3, 5, SMALL.d_full)
        assert trace.pooled.shape == (3, SMALL.d_full)

    def test_deterministic_across_instances(self, rng):
        tokens, mask = batch(rng)
        a = TinyEncoder(SMALL).forward(tokens, mask).pooled.data
        b = TinyEncoder(SMALL).forward(tokens, mask).pooled.data
        np.testing.assert_array_equal(a, b)

    def test_init_seed_changes_weights(self, rng):
        tokens, mask = batch(rng)
        cfg2 = EncoderConfig(**{**SMALL.__dict__, "init_seed": 7})
        a = TinyEncoder(SMALL).forward(tokens, mask).pooled.data
        b = TinyEncoder(cfg2).forward(tokens, mask).pooled.data
        assert not np.array_equal(a, b)

    def test_masked_positions_do_not_influence_output(self, rng):
        # Change token ids under the mask; active outputs must be
        # bit-identical because masked keys underflow to zero weight and
        # pooling skips them.
        enc = TinyEncoder(SMALL)
        tokens, mask = batch(rng)
        altered = tokens.copy()
        altered[0, -2:] = 17
        a = enc.forward(tokens, mask)
        b = enc.forward(altered, mask)
        np.testing.assert_array_equal(a.pooled.data, b.pooled.data)
        active = mask.flags.astype(bool)
        for ha, hb in zip(a.layers, b.layers):
            np.testing.assert_array_equal(ha.data[active], hb.data[active])

    def test_padding_length_invariance(self, rng):
        # Appending fully masked columns must not change active rows.
        enc = TinyEncoder(SMALL)
        tokens = rng.integers(1, SMALL.vocab_size, size=(2, 4))
        mask = np.ones((2, 4), dtype=int)
        padded_tokens = np.concatenate([tokens, np.zeros((2, 2), dtype=int)], axis=1)
        padded_mask = np.concatenate([mask, np.zeros((2, 2), dtype=int)], axis=1)
        a = enc.forward(tokens, SequenceMask(mask))
        b = enc.forward(padded_tokens, SequenceMask(padded_mask))
        np.testing.assert_allclose(a.pooled.data, b.pooled.data, rtol=1e-12, atol=1e-12)

    def test_dropout_seeds(self, rng):
        enc = TinyEncoder(SMALL)
        tokens, mask = batch(rng)
        a = enc.forward(tokens, mask, dropout_seed=1, train_mode=True).pooled.data
        b = enc.forward(tokens, mask, dropout_seed=1, train_mode=True).pooled.data
        c = enc.forward(tokens, mask, dropout_seed=2, train_mode=True).pooled.data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_eval_mode_ignores_dropout(self, rng):
        enc = TinyEncoder(SMALL)
        tokens, mask = batch(rng)
        a = enc.forward(tokens, mask, dropout_seed=1).pooled.data
        b = enc.forward(tokens, mask, dropout_seed=2).pooled.data
        np.testing.assert_array_equal(a, b)

    def test_two_view_forward_needs_distinct_seeds(self, rng):
        enc = TinyEncoder(SMALL)
        tokens, mask = batch(rng)
        with pytest.raises(ContractError):
            enc.two_view_forward(tokens, mask, 3, 3)
        ta, tb = enc.two_view_forward(tokens, mask, 3, 4)
        assert not np.array_equal(ta.pooled.data, tb.pooled.data)

    def test_input_validation(self, rng):
        enc = TinyEncoder(SMALL)
        tokens, mask = batch(rng)
        with pytest.raises(VocabError):
            enc.forward(np.full_like(tokens, SMALL.vocab_size), mask)
        with pytest.raises(VocabError):
            enc.forward(np.full_like(tokens, -1), mask)
        with pytest.raises(ContractError):
            enc.forward(tokens[0], mask)
        with pytest.raises(ContractError):
            enc.forward(tokens[:, :3], mask)
        long_tokens = rng.integers(1, SMALL.vocab_size, size=(1, SMALL.max_len + 1))
        with pytest.raises(InvalidDimensionError):
            enc.forward(long_tokens, SequenceMask(np.ones((1, SMALL.max_len + 1), dtype=int)))
        dead = SequenceMask(np.zeros((3, 5), dtype=int))
        with pytest.raises(DegenerateSequenceError):
            enc.forward(tokens, dead)

    def test_no_inert_parameters(self, rng):
        # Every parameter must receive gradient from a pooled-sum loss on
        # a batch with live dropout disabled: dead weights would defeat
        # both training and finite-difference certification.
        enc = TinyEncoder(SMALL)
        tokens, mask = batch(rng)
        loss = enc.forward(tokens, mask).pooled.sum()
        grads = ag.backward(loss)
        missing = [n for n, p in enc.parameters().items() if p not in grads]
        assert missing == []
        zero = [
            n
            for n, p in enc.parameters().items()
            if n != "pos_emb" and not np.any(grads[p])
        ]
        assert zero == []

    def test_float32_mode_runs(self, rng):
        cfg = EncoderConfig(**{**SMALL.__dict__, "dtype": "float32"})
        enc = TinyEncoder(cfg)
        tokens, mask = batch(rng)
        trace = enc.forward(tokens, mask)
        assert trace.pooled.dtype == np.float32


class TestCheckpoint:
    def test_roundtrip(self, rng, tmp_path):
        enc = TinyEncoder(SMALL)
        tokens, mask = batch(rng)
        before = enc.forward(tokens, mask).pooled.data
        path = tmp_path / "enc.npz"
        enc.save(path, extra={"opt.t": np.array(3.0)}, meta={"note": "x"})
        loaded, extra, meta = TinyEncoder.load(path)
        after = loaded.forward(tokens, mask).pooled.data
        np.testing.assert_array_equal(before, after)
        assert extra["opt.t"] == 3.0
        assert meta["note"] == "x"
        assert loaded.config == SMALL

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            TinyEncoder.load(tmp_path / "nope.npz")

    def test_corrupt_weights_rejected(self, rng, tmp_path):
        enc = TinyEncoder(SMALL)
        path = tmp_path / "enc.npz"
        enc.save(path)
        blob = dict(np.load(path, allow_pickle=False))
        blob["w.tok_emb"] = blob["w.tok_emb"][:, :-1]
        np.savez(path, **blob)
        with pytest.raises(CheckpointError):
            TinyEncoder.load(path)

    def test_missing_weight_rejected(self, rng, tmp_path):
        enc = TinyEncoder(SMALL)
        path = tmp_path / "enc.npz"
        enc.save(path)
        blob = dict(np.load(path, allow_pickle=False))
        del blob["w.layers.0.attn.wq"]
        np.savez(path, **blob)
        with pytest.raises(CheckpointError):
            TinyEncoder.load(path)
