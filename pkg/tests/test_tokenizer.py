import numpy as np
import pytest

from models.errors import DataError, DimensionError
from services.autodiff import Tensor
from services.tokenizer_service import (
    Codebook,
    VQTokenizer,
    codebook_utilization,
    dequantize,
    ema_update,
    quantize,
    reset_inactive_codes,
    train_vqvae,
    vq_loss,
)

AXES = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)


class TestQuantize:
    def test_picks_most_similar_code(self):
        h = np.array([[0.9, 0.1], [0.2, 0.8]])
        np.testing.assert_array_equal(quantize(h, AXES), [0, 1])

    def test_ties_go_to_lowest_index(self):
        h = np.array([[1.0, 1.0]]) / np.sqrt(2.0)
        assert quantize(h, AXES)[0] == 0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            quantize(np.ones((2, 3)), AXES)

    @pytest.mark.parametrize("alpha", [1e-3, 0.37, 1.0, 2.5, 1e3])
    def test_positive_scaling_keeps_the_code(self, alpha):
        rng = np.random.default_rng(int(alpha * 1000))
        codebook = Codebook.random(32, 6, rng)
        h = rng.standard_normal((1000, 6))
        np.testing.assert_array_equal(quantize(alpha * h, codebook), quantize(h, codebook))

    def test_scaling_over_random_factors(self, rng):
        codebook = Codebook.random(16, 4, rng)
        h = rng.standard_normal((1000, 4))
        alphas = rng.uniform(1e-2, 1e2, size=(1000, 1))
        np.testing.assert_array_equal(quantize(alphas * h, codebook), quantize(h, codebook))

    def test_dequantize_looks_up_codes(self):
        np.testing.assert_array_equal(dequantize(np.array([1, 0, 1]), AXES), AXES[[1, 0, 1]])

    def test_dequantize_rejects_out_of_range(self):
        with pytest.raises(DataError):
            dequantize(np.array([2]), AXES)


class TestCodebookMaintenance:
    def test_ema_update_moves_assigned_code(self):
        codebook = Codebook(AXES)
        latents = np.tile([0.0, 1.0], (10, 1))
        ema_update(codebook, latents, np.zeros(10, dtype=int), decay=0.99)
        expected = np.array([0.99, 0.1]) / np.linalg.norm([0.99, 0.1])
        np.testing.assert_allclose(codebook.codes[0], expected, rtol=1e-5)
        np.testing.assert_allclose(codebook.codes[1], [0.0, 1.0], atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(codebook.codes, axis=1), 1.0, rtol=1e-5)

    def test_reset_replaces_unused_codes(self, rng):
        codebook = Codebook(np.eye(4, dtype=np.float32))
        donors = np.array([[3.0, 4.0, 0.0, 0.0]])
        reset = reset_inactive_codes(codebook, donors, 0, rng, usage=np.array([3, 0, 0, 1]))
        assert reset == [1, 2]
        np.testing.assert_allclose(codebook.codes[1], [0.6, 0.8, 0.0, 0.0], rtol=1e-6)
        np.testing.assert_array_equal(codebook.codes[0], [1.0, 0.0, 0.0, 0.0])
        assert codebook.usage.sum() == 0

    def test_reset_without_donors_is_skipped(self, rng):
        codebook = Codebook(np.eye(3, dtype=np.float32))
        assert reset_inactive_codes(codebook, np.zeros((0, 3)), 0, rng, usage=np.zeros(3)) == []


def test_vq_loss_vanishes_on_perfect_reconstruction(rng):
    x = Tensor(rng.standard_normal((2, 4, 3)))
    h = rng.standard_normal((2, 2, 5))
    h /= np.linalg.norm(h, axis=-1, keepdims=True)
    assert vq_loss(x, x, Tensor(h), h, 0.5).item() == pytest.approx(0.0, abs=1e-12)


class TestTraining:
    def test_smoke(self, tiny_windows, tiny_vq_config):
        tokenizer, logs = train_vqvae(tiny_windows, tiny_vq_config, seed=0)
        assert [log.epoch for log in logs] == [1, 2, 3]
        assert all(np.isfinite(log.loss) and 0.0 <= log.utilization <= 1.0 for log in logs)

        latents = tokenizer.encode(tiny_windows[:5])
        assert latents.shape == (5, 2, 8)
        np.testing.assert_allclose(np.linalg.norm(latents, axis=-1), 1.0, rtol=1e-4)
        assert tokenizer.decode(tokenizer.dequantize(tokenizer.quantize(latents))).shape == (5, 8, 2)
        assert 0.0 < codebook_utilization(tokenizer, tiny_windows) <= 1.0

    def test_same_seed_same_weights(self, tiny_windows, tiny_vq_config):
        first, _ = train_vqvae(tiny_windows, tiny_vq_config, seed=5, epochs=2)
        second, _ = train_vqvae(tiny_windows, tiny_vq_config, seed=5, epochs=2)
        a, b = first.state_arrays(), second.state_arrays()
        assert a.keys() == b.keys()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_encode_rejects_bad_input(self, toy_tokenizer):
        with pytest.raises(DimensionError):
            toy_tokenizer.encode(np.zeros((3, 7, 2)))
        bad = np.zeros((1, 8, 2))
        bad[0, 3, 1] = np.nan
        with pytest.raises(DataError):
            toy_tokenizer.encode(bad)

    def test_encode_prefix_needs_whole_latent_positions(self, toy_tokenizer, tiny_windows):
        assert toy_tokenizer.encode_prefix(tiny_windows[:2, :4]).shape == (2, 1, 8)
        with pytest.raises(DimensionError):
            toy_tokenizer.encode_prefix(tiny_windows[:2, :3])

    def test_save_and_load(self, toy_tokenizer, tiny_windows, tmp_path):
        path = str(tmp_path / "stage1.ckpt")
        toy_tokenizer.save(path)
        restored = VQTokenizer.load(path)
        assert restored.config == toy_tokenizer.config
        np.testing.assert_array_equal(restored.tokenize(tiny_windows), toy_tokenizer.tokenize(tiny_windows))

    def test_rejects_wrong_window_shape(self, tiny_vq_config):
        with pytest.raises(DimensionError):
            train_vqvae(np.zeros((4, 6, 2)), tiny_vq_config, seed=0)
