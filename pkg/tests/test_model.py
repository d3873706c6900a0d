"""Tests for the toy transformer: forward, taps, adapter gradients, checkpoints."""

from __future__ import annotations

import numpy as np
import pytest

from editstop.errors import (
    BadMagicError,
    ChecksumMismatchError,
    NoRecordedGraphError,
    TruncatedFileError,
    VocabOverflowError,
)
from editstop.model import (
    ModelConfig,
    TapSpec,
    backward_lora,
    forward,
    init_model,
    load_checkpoint,
    masked_cross_entropy,
    module_path,
    predictive_distributions,
    save_checkpoint,
)

TINY = ModelConfig(
    vocab_size=12,
    d_model=16,
    n_heads=2,
    n_blocks=2,
    lora_rank=3,
    block_length=4,
    max_blocks=2,
    seed=3,
)


def tiny_model(seed=3):
    return init_model(ModelConfig(**{**TINY.to_json_dict(), "seed": seed}))


def randomize_lora(model, rng, scale=0.1):
    for key in sorted(model.lora):
        model.lora[key] = rng.normal(size=model.lora[key].shape) * scale


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.head_dim == 16
        assert cfg.mask_id == 63
        assert cfg.max_positions == 64
        assert cfg.content_dims == 48

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"d_model": 65},
            {"n_heads": 0},
            {"lora_rank": 0},
            {"block_length": 1},
            {"vocab_size": 2},
            {"d_model": 8, "n_heads": 4},
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)


class TestForward:
    def test_all_mask_input_gives_finite_logits(self):
        model = tiny_model()
        tokens = np.full((1, 8), TINY.mask_id)
        res = forward(model, tokens)
        assert res.logits.shape == (1, 8, TINY.vocab_size)
        assert np.all(np.isfinite(res.logits))

    def test_zeroed_b_adapters_match_base_model(self):
        # B starts at zero, so scrambling every A must not move the output.
        model = tiny_model()
        tokens = np.array([[1, 2, 3, 4, 5, 6, 0, 7]])
        before = forward(model, tokens).logits
        for key in model.lora:
            if key.endswith("lora_a"):
                model.lora[key] = model.lora[key] + 10.0
        after = forward(model, tokens).logits
        np.testing.assert_array_equal(before, after)

    def test_deterministic_bit_identical(self):
        tokens = np.array([[3, 1, 4, 1, 5, 9, 2, 6]])
        a = forward(tiny_model(), tokens).logits
        b = forward(tiny_model(), tokens).logits
        assert a.tobytes() == b.tobytes()

    def test_one_dim_input_promoted(self):
        res = forward(tiny_model(), np.array([1, 2, 3]))
        assert res.logits.shape == (1, 3, TINY.vocab_size)

    def test_vocab_overflow_rejected(self):
        with pytest.raises(VocabOverflowError):
            forward(tiny_model(), np.array([[0, TINY.vocab_size]]))

    def test_too_long_sequence_rejected(self):
        with pytest.raises(ValueError):
            forward(tiny_model(), np.zeros((1, TINY.max_positions + 1), dtype=int))

    def test_mask_token_never_wins_readout(self):
        model = tiny_model()
        tokens = np.full((1, 8), TINY.mask_id)
        logits = forward(model, tokens).logits[0]
        assert np.all(logits.argmax(axis=-1) != TINY.mask_id)


class TestTaps:
    def test_branch_tap_zero_at_init(self):
        model = tiny_model()
        spec = TapSpec(module_path(1, "q"), "branch")
        res = forward(model, np.array([[1, 2, 3]]), taps=(spec,))
        np.testing.assert_array_equal(res.taps[spec], 0.0)

    def test_full_tap_matches_manual_projection(self):
        model = tiny_model()
        randomize_lora(model, np.random.default_rng(0))
        spec = TapSpec(module_path(0, "k"), "full")
        branch_spec = TapSpec(module_path(0, "k"), "branch")
        tokens = np.array([[5, 6, 7, 8]])
        res = forward(model, tokens, taps=(spec, branch_spec))
        x = model.base["emb_tok"][tokens] + model.base["emb_pos"][:4][None]
        w = model.base["block0.wk"]
        a = model.lora["block0.k.lora_a"]
        b = model.lora["block0.k.lora_b"]
        expect_branch = (x @ a.T) @ b.T
        np.testing.assert_allclose(res.taps[branch_spec], expect_branch, atol=1e-12)
        np.testing.assert_allclose(res.taps[spec], x @ w.T + expect_branch, atol=1e-12)

    def test_registered_taps_used_by_default(self):
        model = tiny_model()
        spec = model.default_tap()
        model.set_taps([spec])
        res = forward(model, np.array([[1, 2]]))
        assert spec in res.taps
        assert res.taps[spec].shape == (1, 2, TINY.d_model)

    def test_unknown_module_rejected(self):
        with pytest.raises(ValueError):
            TapSpec("block0.z")
        with pytest.raises(ValueError):
            forward(tiny_model(), np.array([[1]]), taps=(TapSpec("block9.q"),))


class TestMaskedCrossEntropy:
    def test_hand_arithmetic(self):
        # Two positions, one masked. Softmax over 3 logits (0, ln2, 0):
        # p = (0.25, 0.5, 0.25); target class 1 -> loss = ln 2.
        logits = np.array([[[0.0, np.log(2.0), 0.0], [5.0, 0.0, 0.0]]])
        targets = np.array([[1, 0]])
        mask = np.array([[True, False]])
        loss, dlogits = masked_cross_entropy(logits, targets, mask)
        assert loss == pytest.approx(np.log(2.0), rel=1e-12)
        np.testing.assert_allclose(dlogits[0, 0], [0.25, -0.5, 0.25], rtol=1e-12)
        np.testing.assert_array_equal(dlogits[0, 1], 0.0)

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            masked_cross_entropy(
                np.zeros((1, 2, 3)), np.zeros((1, 2), dtype=int), np.zeros((1, 2), bool)
            )

    def test_predictive_distributions_exclude_mask(self):
        rows = predictive_distributions(np.zeros((2, 5)), vocab_size=5)
        assert rows[0].support == (0, 1, 2, 3)
        np.testing.assert_allclose(rows[0].probs, 0.25, rtol=1e-12)


class TestBackward:
    def loss_fn(self, model, tokens, targets, mask):
        res = forward(model, tokens, taps=(), record=True)
        loss, dlogits = masked_cross_entropy(res.logits, targets, mask)
        return res, loss, dlogits

    def test_requires_recorded_graph(self):
        model = tiny_model()
        res = forward(model, np.array([[1, 2]]))
        with pytest.raises(NoRecordedGraphError):
            backward_lora(model, res, np.zeros_like(res.logits))

    def test_linearity_in_dlogits(self):
        model = tiny_model()
        randomize_lora(model, np.random.default_rng(1))
        res = forward(model, np.array([[1, 2, 3, 4]]), record=True)
        d = np.random.default_rng(2).normal(size=res.logits.shape)
        g1 = backward_lora(model, res, d)
        g2 = backward_lora(model, res, 2.0 * d)
        for key in g1:
            np.testing.assert_allclose(g2[key], 2.0 * g1[key], rtol=1e-10, atol=1e-14)

    def test_finite_difference_agreement(self):
        # Central differences at step 1e-5 on >= 50 random coordinates
        # spanning every adapter tensor of a 2-layer model.
        model = tiny_model()
        rng = np.random.default_rng(7)
        randomize_lora(model, rng)
        tokens = np.array([[1, 2, 3, 4, 11, 11, 11, 11]])
        targets = np.array([[1, 2, 3, 4, 4, 3, 2, 1]])
        mask = np.array([[False] * 4 + [True] * 4])
        res, _, dlogits = self.loss_fn(model, tokens, targets, mask)
        grads = backward_lora(model, res, dlogits)
        step = 1e-5
        checked = 0
        for key in sorted(model.lora):
            flat = model.lora[key].reshape(-1)
            idx = rng.choice(flat.size, size=min(5, flat.size), replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                _, up, _ = self.loss_fn(model, tokens, targets, mask)
                flat[i] = orig - step
                _, down, _ = self.loss_fn(model, tokens, targets, mask)
                flat[i] = orig
                fd = (up - down) / (2.0 * step)
                an = grads[key].reshape(-1)[i]
                assert an == pytest.approx(fd, rel=1e-4, abs=1e-8), key
                checked += 1
        assert checked >= 50

    def test_near_perfect_logits_give_small_gradients(self):
        model = tiny_model()
        res = forward(model, np.array([[1, 2]]), record=True)
        # A uniform logit offset is softmax-invariant; the CE gradient of
        # a peaked correct prediction is ~0, so adapter gradients are ~0.
        huge = np.zeros_like(res.logits)
        huge[..., 3] = 50.0
        loss, dlogits = masked_cross_entropy(
            huge, np.full((1, 2), 3), np.ones((1, 2), bool)
        )
        assert loss < 1e-12
        grads = backward_lora(model, res, dlogits)
        for key, g in grads.items():
            assert np.abs(g).max() < 1e-12, key


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        model = tiny_model()
        randomize_lora(model, np.random.default_rng(3))
        path = tmp_path / "model.editckpt"
        blob = save_checkpoint(model, path)
        assert path.read_bytes() == blob
        loaded = load_checkpoint(path)
        assert loaded.cfg == model.cfg
        for key in model.base:
            np.testing.assert_array_equal(loaded.base[key], model.base[key])
        for key in model.lora:
            np.testing.assert_array_equal(loaded.lora[key], model.lora[key])
        assert save_checkpoint(loaded, None) == blob

    def test_save_deterministic(self, tmp_path):
        a = save_checkpoint(tiny_model(), None)
        b = save_checkpoint(tiny_model(), None)
        assert a == b

    def test_corruption_detected(self, tmp_path):
        path = tmp_path / "m.editckpt"
        blob = bytearray(save_checkpoint(tiny_model(), path))
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ChecksumMismatchError):
            load_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "m.editckpt"
        blob = save_checkpoint(tiny_model(), path)
        path.write_bytes(blob[:10])
        with pytest.raises(TruncatedFileError):
            load_checkpoint(path)

    def test_bad_magic_detected(self, tmp_path):
        path = tmp_path / "m.editckpt"
        blob = save_checkpoint(tiny_model(), path)
        path.write_bytes(b"XXXXXXXX" + blob[8:])
        with pytest.raises(BadMagicError):
            load_checkpoint(path)


class TestStructuredInit:
    def test_base_checksum_stable_across_instances(self):
        assert tiny_model().base_checksum() == tiny_model().base_checksum()
        assert tiny_model().base_checksum() != tiny_model(seed=4).base_checksum()

    def test_position_dims_never_written_by_blocks(self):
        cfg = ModelConfig()
        model = init_model(cfg)
        pos0 = cfg.content_dims
        for b in range(cfg.n_blocks):
            assert np.all(model.base[f"block{b}.wo"][pos0:] == 0.0)
            assert np.all(model.base[f"block{b}.w2"][pos0:] == 0.0)

    def test_mask_embedding_has_no_content(self):
        cfg = ModelConfig()
        model = init_model(cfg)
        assert np.all(model.base["emb_tok"][cfg.mask_id] == 0.0)
        assert np.all(model.base["head"][cfg.mask_id] == 0.0)
