import logging
import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from models.errors import ConfigurationError, DimensionError
from services.autodiff import (
    DEFAULT_DTYPE,
    Tensor,
    concat,
    conv1d,
    layer_norm,
    relu,
    silu,
    softmax,
)

# Set up logger
logger = logging.getLogger(__name__)


def Parameter(data, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, dtype=dtype)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Fan-in scaled uniform init, bound sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Container of parameters and sub-modules, discovered by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise DimensionError(f"state is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"parameter {name} expects shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True, zero_init: bool = False):
        if zero_init:
            weight = np.zeros((in_features, out_features))
        else:
            weight = kaiming_uniform(rng, (in_features, out_features), in_features)
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = in_channels * kernel_size
        self.weight = Parameter(kaiming_uniform(rng, (out_channels, in_channels, kernel_size), fan_in))
        self.bias = Parameter(np.zeros((out_channels, 1)))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, stride=self.stride, padding=self.padding) + self.bias


class ResidualBlock(Module):
    """x + conv(relu(conv(relu(x)))) with same padding."""

    def __init__(self, channels: int, rng: np.random.Generator, kernel_size: int = 3):
        pad = kernel_size // 2
        self.conv1 = Conv1d(channels, channels, kernel_size, rng, padding=pad)
        self.conv2 = Conv1d(channels, channels, kernel_size, rng, padding=pad)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(relu(self.conv1(relu(x))))


class AdaLN(Module):
    """Layer norm modulated by a conditioning vector: norm(x) * (1 + scale) + shift.

    The projection starts at zero so modulation is neutral at init.
    """

    def __init__(self, d_model: int, d_cond: int, rng: np.random.Generator):
        self.d_model = d_model
        self.modulation = Linear(d_cond, 2 * d_model, rng, zero_init=True)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        params = self.modulation(silu(cond))
        d = self.d_model
        scale = params[..., :d]
        shift = params[..., d:]
        if x.ndim == 3 and scale.ndim == 2:
            scale = scale.reshape(scale.shape[0], 1, d)
            shift = shift.reshape(shift.shape[0], 1, d)
        return layer_norm(x) * (1.0 + scale) + shift


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads != 0:
            logger.error(f"d_model {d_model} is not divisible by {heads} heads")
            raise ConfigurationError(f"d_model {d_model} is not divisible by heads {heads}")
        self.heads = heads
        self.d_model = d_model
        self.query = Linear(d_model, d_model, rng)
        self.key = Linear(d_model, d_model, rng)
        self.value = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor, batch: int, length: int) -> Tensor:
        head_dim = self.d_model // self.heads
        return x.reshape(batch, length, self.heads, head_dim).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor) -> Tensor:
        unbatched = x.ndim == 2
        if unbatched:
            x = x.reshape(1, *x.shape)
        batch, length, _ = x.shape
        head_dim = self.d_model // self.heads
        q = self._split(self.query(x), batch, length)
        k = self._split(self.key(x), batch, length)
        v = self._split(self.value(x), batch, length)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
        attended = softmax(scores) @ v
        merged = attended.transpose(0, 2, 1, 3).reshape(batch, length, self.d_model)
        out = self.out(merged)
        if unbatched:
            out = out.reshape(length, self.d_model)
        return out


class AttentionBlock(Module):
    """Pre-norm self-attention and SiLU MLP, both residual.

    With ``d_cond`` set, both norms are AdaLN layers driven by the conditioning
    vector; otherwise they are plain layer norms.
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, d_cond: Optional[int] = None, mlp_ratio: int = 4):
        self.attention = MultiHeadAttention(d_model, heads, rng)
        self.norm1 = AdaLN(d_model, d_cond, rng) if d_cond else None
        self.norm2 = AdaLN(d_model, d_cond, rng) if d_cond else None
        self.mlp_in = Linear(d_model, mlp_ratio * d_model, rng)
        self.mlp_out = Linear(mlp_ratio * d_model, d_model, rng)

    def _norm(self, norm: Optional[AdaLN], x: Tensor, cond: Optional[Tensor]) -> Tensor:
        if norm is None or cond is None:
            return layer_norm(x)
        return norm(x, cond)

    def forward(self, x: Tensor, cond: Optional[Tensor] = None) -> Tensor:
        x = x + self.attention(self._norm(self.norm1, x, cond))
        return x + self.mlp_out(silu(self.mlp_in(self._norm(self.norm2, x, cond))))


def prepend_token(token: Tensor, x: Tensor) -> Tensor:
    """Prepend a learned (1, d) token to every sequence of a (B, L, d) batch."""
    batch = x.shape[0]
    tokens = token.reshape(1, 1, token.shape[-1]) * Tensor(np.ones((batch, 1, 1), dtype=x.dtype))
    return concat([tokens, x], axis=1)
