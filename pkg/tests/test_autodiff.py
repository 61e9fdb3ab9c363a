import numpy as np
import pytest

from models.errors import ContractError, DataError, DimensionError, ParameterError
from services import autodiff as ad
from services.autodiff import Tape, Tensor, backward, gradient_check


def _param(rng, shape, dtype=np.float64, positive=False, away_from_zero=False):
    data = rng.standard_normal(shape)
    if positive:
        data = 0.5 + np.abs(data)
    elif away_from_zero:
        data = np.sign(data) * (0.5 + np.abs(data))
    return Tensor(data.astype(dtype), requires_grad=True, dtype=dtype)


def _op_cases():
    """name -> builder(rng, dtype) returning (loss_fn, params)."""

    def unary(op, **kw):
        def build(rng, dtype):
            a = _param(rng, (3, 4), dtype, **kw)
            w = Tensor(rng.standard_normal((3, 4)).astype(dtype), dtype=dtype)
            return (lambda: (op(a) * w).sum()), [a]
        return build

    def binary(op, positive_b=False):
        def build(rng, dtype):
            a = _param(rng, (3, 4), dtype)
            b = _param(rng, (4,), dtype, positive=positive_b)
            w = Tensor(rng.standard_normal((3, 4)).astype(dtype), dtype=dtype)
            return (lambda: (op(a, b) * w).sum()), [a, b]
        return build

    def conv(rng, dtype):
        x = _param(rng, (2, 3, 9), dtype)
        k = _param(rng, (4, 3, 3), dtype)
        w = Tensor(rng.standard_normal((2, 4, 5)).astype(dtype), dtype=dtype)
        return (lambda: (ad.conv1d(x, k, stride=2, padding=1) * w).sum()), [x, k]

    def matmul(rng, dtype):
        a = _param(rng, (2, 3, 5), dtype)
        b = _param(rng, (5, 4), dtype)
        w = Tensor(rng.standard_normal((2, 3, 4)).astype(dtype), dtype=dtype)
        return (lambda: ((a @ b) * w).sum()), [a, b]

    def concat(rng, dtype):
        a = _param(rng, (2, 3), dtype)
        b = _param(rng, (2, 2), dtype)
        w = Tensor(rng.standard_normal((2, 5)).astype(dtype), dtype=dtype)
        return (lambda: (ad.concat([a, b], axis=1) * w).sum()), [a, b]

    def cross_entropy(rng, dtype):
        logits = _param(rng, (4, 5), dtype)
        targets = rng.integers(0, 5, size=4)
        return (lambda: ad.cross_entropy(logits, targets, temperature=0.8)), [logits]

    def shaped(fn, shape=(2, 3, 4)):
        def build(rng, dtype):
            a = _param(rng, shape, dtype)
            sample_out = fn(Tensor(np.zeros(shape, dtype=dtype), dtype=dtype))
            w = Tensor(rng.standard_normal(sample_out.shape).astype(dtype), dtype=dtype)
            return (lambda: (fn(a) * w).sum()), [a]
        return build

    return {
        "add": binary(lambda a, b: a + b),
        "sub": binary(lambda a, b: a - b),
        "mul": binary(lambda a, b: a * b),
        "div": binary(lambda a, b: a / b, positive_b=True),
        "neg": unary(lambda a: -a),
        "power": unary(lambda a: a ** 2.5, positive=True),
        "exp": unary(ad.exp),
        "log": unary(ad.log, positive=True),
        "sqrt": unary(ad.sqrt, positive=True),
        "absolute": unary(ad.absolute, away_from_zero=True),
        "relu": unary(ad.relu, away_from_zero=True),
        "silu": unary(ad.silu),
        "sum_axis": shaped(lambda a: a.sum(axis=1)),
        "mean_axes": shaped(lambda a: a.mean(axis=(0, 2))),
        "reshape": shaped(lambda a: a.reshape(6, 4)),
        "transpose": shaped(lambda a: a.transpose(2, 0, 1)),
        "getitem": shaped(lambda a: a[np.array([0, 0, 1])]),
        "repeat": shaped(lambda a: ad.repeat(a, 3, axis=2)),
        "softmax": shaped(lambda a: ad.softmax(a, temperature=0.7)),
        "log_softmax": shaped(lambda a: ad.log_softmax(a, temperature=1.3)),
        "layer_norm": shaped(ad.layer_norm),
        "normalize": shaped(ad.normalize),
        "matmul": matmul,
        "conv1d": conv,
        "concat": concat,
        "cross_entropy": cross_entropy,
    }


OP_CASES = _op_cases()


class TestGradients:
    @pytest.mark.parametrize("name", sorted(OP_CASES))
    def test_primitive_double_precision(self, name):
        rng = np.random.default_rng(7)
        fn, params = OP_CASES[name](rng, np.float64)
        assert gradient_check(fn, params) < 1e-6

    @pytest.mark.parametrize("name", ["add", "mul", "exp", "matmul", "conv1d", "softmax", "cross_entropy"])
    def test_primitive_single_precision(self, name):
        rng = np.random.default_rng(11)
        fn, params = OP_CASES[name](rng, np.float32)
        assert gradient_check(fn, params) < 1e-3

    def test_matmul_sum_gradient_is_ones_times_b_transpose(self, rng):
        a = Tensor(rng.standard_normal((5, 7)), requires_grad=True)
        b = Tensor(rng.standard_normal((7, 3)))
        with Tape() as tape:
            loss = (a @ b).sum()
            backward(loss, tape)
        np.testing.assert_allclose(a.grad, np.ones((5, 3)) @ b.data.T, rtol=1e-12)

    def test_composite_conv_norm_softmax_ce(self, rng):
        x = _param(rng, (3, 2, 8))
        k = _param(rng, (4, 2, 3))
        targets = rng.integers(0, 4, size=(3, 8))

        def loss():
            h = ad.layer_norm(ad.conv1d(x, k, padding=1).transpose(0, 2, 1))
            return ad.cross_entropy(h, targets)

        assert gradient_check(loss, [x, k]) < 1e-6

    def test_composite_attention_style_graph(self, rng):
        q = _param(rng, (4, 6))
        kv = _param(rng, (4, 6))

        def loss():
            scores = ad.softmax(q @ kv.transpose(1, 0) / np.sqrt(6.0))
            mixed = scores @ kv
            return (ad.silu(mixed) * ad.silu(mixed)).mean()

        assert gradient_check(loss, [q, kv]) < 1e-6

    def test_composite_with_shared_subexpression(self, rng):
        a = _param(rng, (3, 3))

        def loss():
            b = ad.normalize(a, axis=0)
            return (b @ a + ad.exp(b)).sum() / 3.0

        assert gradient_check(loss, [a]) < 1e-6


class TestForward:
    def test_matmul_hand_values(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = Tensor(np.array([[0.0], [1.0]]))
        np.testing.assert_array_equal((a @ b).data, [[2.0], [4.0]])
        np.testing.assert_array_equal((Tensor(np.eye(2)) @ a).data, a.data)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_conv1d_hand_values(self):
        x = Tensor(np.array([[1.0, 2.0, 3.0, 4.0]]))
        w = Tensor(np.array([[[1.0, 1.0]]]))
        np.testing.assert_array_equal(ad.conv1d(x, w, stride=2).data, [[3.0, 7.0]])

    def test_conv1d_identity_kernel(self, rng):
        x = Tensor(rng.standard_normal((3, 6)))
        w = Tensor(np.eye(3)[:, :, None])
        np.testing.assert_allclose(ad.conv1d(x, w).data, x.data)

    def test_conv1d_rejects_oversized_kernel(self):
        with pytest.raises(DimensionError):
            ad.conv1d(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 1, 3))))

    def test_softmax_values(self):
        np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)
        np.testing.assert_allclose(ad.softmax(Tensor(np.array([0.0, np.log(3.0)]))).data, [0.25, 0.75])
        sharp = ad.softmax(Tensor(np.array([5.0, 0.0, 0.0])), temperature=0.01).data
        assert sharp[0] > 0.999

    def test_softmax_large_logits_stay_normalized(self, rng):
        logits = Tensor(rng.uniform(-1e4, 1e4, size=(16, 10)))
        probs = ad.softmax(logits).data
        assert np.isfinite(probs).all()
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_softmax_rejects_nonpositive_temperature(self, tau):
        with pytest.raises(ParameterError):
            ad.softmax(Tensor(np.zeros(3)), temperature=tau)

    def test_cross_entropy_rejects_bad_targets(self):
        with pytest.raises(DataError):
            ad.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_layer_norm_constant_row_is_zero(self):
        out = ad.layer_norm(Tensor(np.full((2, 5), 3.0))).data
        np.testing.assert_array_equal(out, 0.0)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        with Tape() as tape:
            backward(x.sum(), tape)
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_squared_norm_gives_two_x(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True)
        with Tape() as tape:
            backward((x * x).sum(), tape)
        np.testing.assert_allclose(x.grad, 2.0 * x.data)

    def test_non_scalar_loss_is_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            with pytest.raises(ContractError):
                backward(x * 2.0, tape)

    def test_tape_is_cleared(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = (x * x).sum()
            assert len(tape) > 0
            backward(loss, tape)
            assert len(tape) == 0

    def test_untracked_ops_record_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            (Tensor(np.ones(3)) * 2.0).sum()
        assert len(tape) == 0
        assert (x * 2.0)._node is None
