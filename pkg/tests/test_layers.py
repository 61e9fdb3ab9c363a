import numpy as np
import pytest

from models.errors import ConfigurationError, DimensionError
from services import autodiff as ad
from services.autodiff import Tensor, gradient_check
from services.layers import (
    AdaLN,
    AttentionBlock,
    Conv1d,
    Linear,
    MultiHeadAttention,
    ResidualBlock,
    prepend_token,
)


def test_linear_and_conv_shapes(rng):
    assert Linear(4, 3, rng)(Tensor(np.ones((5, 4)))).shape == (5, 3)
    conv = Conv1d(2, 6, 3, rng, stride=2, padding=1)
    assert conv(Tensor(np.ones((4, 2, 8)))).shape == (4, 6, 4)
    block = ResidualBlock(6, rng)
    assert block(Tensor(np.ones((4, 6, 4)))).shape == (4, 6, 4)


def test_state_dict_round_trip(rng):
    source = Linear(3, 2, rng)
    target = Linear(3, 2, np.random.default_rng(99))
    target.load_state_dict(source.state_dict())
    np.testing.assert_array_equal(target.weight.data, source.weight.data)
    with pytest.raises(DimensionError):
        target.load_state_dict({"weight": np.zeros((3, 2))})
    with pytest.raises(DimensionError):
        target.load_state_dict({"weight": np.zeros((2, 3)), "bias": np.zeros(2)})


class TestAdaLN:
    def test_neutral_at_init(self, rng):
        norm = AdaLN(6, 4, rng)
        x = Tensor(rng.standard_normal((3, 6)))
        cond = Tensor(rng.standard_normal((3, 4)))
        np.testing.assert_allclose(norm(x, cond).data, ad.layer_norm(x).data, rtol=1e-6, atol=1e-6)

    def test_constant_rows_output_the_shift(self, rng):
        norm = AdaLN(5, 3, rng).to(np.float64)
        norm.modulation.weight.data = rng.standard_normal((3, 10))
        norm.modulation.bias.data = rng.standard_normal(10)
        cond = rng.standard_normal((2, 3))
        x = Tensor(np.full((2, 5), 7.0))
        silu_cond = cond * ad.sigmoid_array(cond)
        shift = (silu_cond @ norm.modulation.weight.data + norm.modulation.bias.data)[:, 5:]
        np.testing.assert_allclose(norm(x, Tensor(cond)).data, shift, atol=1e-10)

    def test_broadcasts_over_sequence(self, rng):
        norm = AdaLN(4, 2, rng)
        out = norm(Tensor(rng.standard_normal((3, 7, 4))), Tensor(rng.standard_normal((3, 2))))
        assert out.shape == (3, 7, 4)

    def test_gradients(self, rng):
        norm = AdaLN(4, 3, rng).to(np.float64)
        norm.modulation.weight.data = 0.3 * rng.standard_normal((3, 8))
        x = Tensor(rng.standard_normal((2, 5, 4)), requires_grad=True)
        cond = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        w = Tensor(rng.standard_normal((2, 5, 4)))
        params = [x, cond] + norm.parameters()
        assert gradient_check(lambda: (norm(x, cond) * w).sum(), params) < 1e-6


class TestAttention:
    def test_heads_must_divide_width(self, rng):
        with pytest.raises(ConfigurationError):
            MultiHeadAttention(10, 3, rng)

    def test_single_position_returns_value_projection(self, rng):
        attention = MultiHeadAttention(4, 2, rng).to(np.float64)
        attention.value.weight.data = np.eye(4)
        attention.out.weight.data = np.eye(4)
        x = Tensor(rng.standard_normal((3, 1, 4)))
        np.testing.assert_allclose(attention(x).data, x.data, atol=1e-12)

    def test_block_is_permutation_equivariant(self, rng):
        block = AttentionBlock(8, 2, rng).to(np.float64)
        x = rng.standard_normal((2, 5, 8))
        perm = np.array([3, 0, 4, 1, 2])
        direct = block(Tensor(x)).data[:, perm]
        permuted = block(Tensor(x[:, perm])).data
        np.testing.assert_allclose(permuted, direct, atol=1e-10)

    def test_conditioned_block_gradients(self, rng):
        block = AttentionBlock(4, 2, rng, d_cond=3).to(np.float64)
        for norm in (block.norm1, block.norm2):
            norm.modulation.weight.data = 0.2 * rng.standard_normal((3, 8))
        x = Tensor(rng.standard_normal((1, 3, 4)), requires_grad=True)
        cond = Tensor(rng.standard_normal((1, 3)))
        w = Tensor(rng.standard_normal((1, 3, 4)))
        assert gradient_check(lambda: (block(x, cond) * w).sum(), [x] + block.parameters()) < 1e-5

    def test_prepend_token(self, rng):
        token = Tensor(rng.standard_normal((1, 4)))
        out = prepend_token(token, Tensor(np.zeros((3, 2, 4))))
        assert out.shape == (3, 3, 4)
        np.testing.assert_allclose(out.data[:, 0], np.repeat(token.data, 3, axis=0), rtol=1e-6)
