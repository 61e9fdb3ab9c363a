import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

from models.errors import ConfigurationError, DataError, DimensionError, DivergenceError
from models.schemas import EpochLog, VqConfig
from services.autodiff import Tape, Tensor, backward, normalize, relu, repeat
from services.checkpoint_service import Checkpoint, load_checkpoint, save_checkpoint
from services.layers import Conv1d, Module, ResidualBlock
from services.optim import Adam

# Set up logger
logger = logging.getLogger(__name__)

KERNEL_SIZE = 3
EMA_EPS = 1e-5


class Codebook:
    """K unit-norm code vectors with EMA statistics and per-epoch usage counters."""

    def __init__(self, codes: np.ndarray):
        codes = np.asarray(codes, dtype=np.float32)
        if codes.ndim != 2 or codes.shape[0] == 0:
            raise ConfigurationError(f"codebook must be a non-empty K x d_c matrix, got shape {codes.shape}")
        self.codes = codes
        self.ema_cluster_size = np.zeros(codes.shape[0], dtype=np.float32)
        self.ema_embed_sum = codes.copy()
        self.usage = np.zeros(codes.shape[0], dtype=np.int64)

    @classmethod
    def random(cls, size: int, dim: int, rng: np.random.Generator) -> "Codebook":
        if size < 1 or dim < 1:
            raise ConfigurationError(f"codebook needs K >= 1 and d_c >= 1, got {size} x {dim}")
        raw = rng.standard_normal((size, dim))
        return cls(raw / np.linalg.norm(raw, axis=1, keepdims=True))

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]


def _codes_of(codebook) -> np.ndarray:
    codes = codebook.codes if isinstance(codebook, Codebook) else np.asarray(codebook)
    if codes.ndim != 2 or codes.shape[0] == 0:
        raise ConfigurationError("codebook is empty")
    return codes


def quantize(h: np.ndarray, codebook) -> np.ndarray:
    """Cosine-similarity argmax over codes; ties resolve to the lowest index."""
    codes = _codes_of(codebook)
    h = np.asarray(h)
    if h.shape[-1] != codes.shape[1]:
        raise DimensionError(f"latent dim {h.shape[-1]} does not match code dim {codes.shape[1]}")
    return np.argmax(h @ codes.T, axis=-1)


def dequantize(tokens: np.ndarray, codebook) -> np.ndarray:
    codes = _codes_of(codebook)
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= codes.shape[0]):
        logger.error(f"Token index out of range [0, {codes.shape[0]})")
        raise DataError(f"token index out of range [0, {codes.shape[0]})")
    return codes[tokens]


def ema_update(codebook: Codebook, latents: np.ndarray, indices: np.ndarray, decay: float, eps: float = EMA_EPS):
    latents = np.asarray(latents, dtype=np.float64).reshape(-1, codebook.dim)
    indices = np.asarray(indices).reshape(-1)
    counts = np.bincount(indices, minlength=codebook.size)
    sums = np.zeros((codebook.size, codebook.dim))
    np.add.at(sums, indices, latents)

    cluster = decay * codebook.ema_cluster_size + (1.0 - decay) * counts
    embed = decay * codebook.ema_embed_sum + (1.0 - decay) * sums
    means = embed / (cluster[:, None] + eps)
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    # A code whose statistics vanished keeps its previous direction.
    safe = norms[:, 0] > 0
    codes = codebook.codes.astype(np.float64)
    codes[safe] = means[safe] / norms[safe]

    codebook.ema_cluster_size = np.maximum(cluster, 0.0).astype(np.float32)
    codebook.ema_embed_sum = embed.astype(np.float32)
    codebook.codes = codes.astype(np.float32)
    return codebook


def reset_inactive_codes(codebook: Codebook, donors: np.ndarray, threshold: int, rng: np.random.Generator,
                         usage: Optional[np.ndarray] = None) -> List[int]:
    """Replace every code used at most ``threshold`` times by a random donor latent."""
    usage = codebook.usage if usage is None else np.asarray(usage)
    dead = np.flatnonzero(usage <= threshold)
    donors = np.asarray(donors, dtype=np.float64).reshape(-1, codebook.dim)
    reset: List[int] = []
    if dead.size and donors.shape[0] == 0:
        logger.warning(f"{dead.size} inactive codes but no donor latents; skipping reset")
    elif dead.size:
        picks = rng.integers(0, donors.shape[0], size=dead.size)
        chosen = donors[picks]
        chosen = chosen / np.maximum(np.linalg.norm(chosen, axis=1, keepdims=True), 1e-12)
        codebook.codes[dead] = chosen.astype(np.float32)
        codebook.ema_embed_sum[dead] = chosen.astype(np.float32)
        codebook.ema_cluster_size[dead] = 1.0
        reset = dead.tolist()
        logger.debug(f"Reset {len(reset)} inactive codes")
    codebook.usage = np.zeros(codebook.size, dtype=np.int64)
    return reset


class Encoder(Module):
    """Conv residual stack with a final strided conv, projected to unit-norm latents."""

    def __init__(self, config: VqConfig, rng: np.random.Generator):
        pad = KERNEL_SIZE // 2
        self.conv_in = Conv1d(config.features, config.hidden, KERNEL_SIZE, rng, padding=pad)
        self.blocks = [ResidualBlock(config.hidden, rng, KERNEL_SIZE) for _ in range(config.enc_dec_layers)]
        self.down = Conv1d(config.hidden, config.hidden, KERNEL_SIZE, rng, stride=config.downsample, padding=pad)
        self.proj = Conv1d(config.hidden, config.code_dim, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv_in(x.transpose(0, 2, 1))
        for block in self.blocks:
            h = block(h)
        h = self.proj(relu(self.down(h)))
        return normalize(h.transpose(0, 2, 1), axis=-1)


class Decoder(Module):
    """Mirror of the encoder: nearest-neighbour repeat by s, then conv back to d features."""

    def __init__(self, config: VqConfig, rng: np.random.Generator):
        pad = KERNEL_SIZE // 2
        self.upsample = config.downsample
        self.conv_in = Conv1d(config.code_dim, config.hidden, KERNEL_SIZE, rng, padding=pad)
        self.blocks = [ResidualBlock(config.hidden, rng, KERNEL_SIZE) for _ in range(config.enc_dec_layers)]
        self.up = Conv1d(config.hidden, config.hidden, KERNEL_SIZE, rng, padding=pad)
        self.conv_out = Conv1d(config.hidden, config.features, KERNEL_SIZE, rng, padding=pad)

    def forward(self, h: Tensor) -> Tensor:
        x = self.conv_in(h.transpose(0, 2, 1))
        for block in self.blocks:
            x = block(x)
        x = relu(self.up(repeat(x, self.upsample, axis=2)))
        return self.conv_out(x).transpose(0, 2, 1)


def _batched(x: np.ndarray, trailing: int) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == trailing:
        return x[None], True
    return x, False


class VQTokenizer:
    """Frozen-after-training Stage-1 tokenizer: encoder, codebook and decoder."""

    def __init__(self, config: VqConfig, rng: np.random.Generator):
        self.config = config
        self.encoder = Encoder(config, rng)
        self.decoder = Decoder(config, rng)
        self.codebook = Codebook.random(config.codebook_size, config.code_dim, rng)

    @property
    def latent_len(self) -> int:
        return self.config.latent_len

    def encode(self, x: np.ndarray) -> np.ndarray:
        """(ell, d) or (B, ell, d) windows to unit-norm latents (.., L, d_c)."""
        xb, single = _batched(x, 2)
        if not np.all(np.isfinite(xb)):
            logger.error("encode received non-finite input")
            raise DataError("encoder input contains NaN or Inf")
        if xb.shape[1:] != (self.config.seq_len, self.config.features):
            raise DimensionError(f"expected windows of shape ({self.config.seq_len}, {self.config.features}), got {xb.shape[1:]}")
        h = self.encoder(Tensor(xb)).data
        return h[0] if single else h

    def encode_prefix(self, x: np.ndarray) -> np.ndarray:
        """Encode leading partial windows (.., P, d); P must be a multiple of s."""
        xb, single = _batched(x, 2)
        if xb.shape[1] % self.config.downsample != 0 or xb.shape[2] != self.config.features:
            raise DimensionError(f"prefix of shape {xb.shape[1:]} does not tile the downsample rate {self.config.downsample}")
        if not np.all(np.isfinite(xb)):
            raise DataError("encoder input contains NaN or Inf")
        h = self.encoder(Tensor(xb)).data
        return h[0] if single else h

    def quantize(self, h: np.ndarray) -> np.ndarray:
        return quantize(h, self.codebook)

    def dequantize(self, tokens: np.ndarray) -> np.ndarray:
        return dequantize(tokens, self.codebook)

    def decode(self, h: np.ndarray) -> np.ndarray:
        hb, single = _batched(h, 2)
        if hb.shape[1:] != (self.latent_len, self.config.code_dim):
            raise DimensionError(f"expected latents of shape ({self.latent_len}, {self.config.code_dim}), got {hb.shape[1:]}")
        x = self.decoder(Tensor(hb)).data
        return x[0] if single else x

    def tokenize(self, windows: np.ndarray) -> np.ndarray:
        return self.quantize(self.encode(windows))

    def reconstruct(self, windows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        tokens = self.tokenize(windows)
        return self.decode(self.dequantize(tokens)), tokens

    def encode_batches(self, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.float32)
        parts = [self.encode(windows[i:i + batch_size]) for i in range(0, len(windows), batch_size)]
        return np.concatenate(parts, axis=0) if parts else np.zeros((0, self.latent_len, self.config.code_dim), np.float32)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"tokenizer.encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        arrays.update({f"tokenizer.decoder.{k}": v for k, v in self.decoder.state_dict().items()})
        arrays["codebook.codes"] = self.codebook.codes.copy()
        arrays["codebook.ema_cluster_size"] = self.codebook.ema_cluster_size.copy()
        arrays["codebook.ema_embed_sum"] = self.codebook.ema_embed_sum.copy()
        return arrays

    def config_block(self) -> Dict[str, object]:
        return {f"vq.{k}": v for k, v in self.config.model_dump().items()}

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "VQTokenizer":
        values = {k[3:]: v for k, v in ckpt.config.items() if k.startswith("vq.")}
        try:
            config = VqConfig(**values)
        except Exception as e:
            raise ConfigurationError(f"checkpoint carries an invalid vq config: {str(e)}")
        tokenizer = cls(config, np.random.default_rng(0))
        tokenizer.encoder.load_state_dict(ckpt.subset("tokenizer.encoder"))
        tokenizer.decoder.load_state_dict(ckpt.subset("tokenizer.decoder"))
        tokenizer.codebook = Codebook(ckpt.arrays["codebook.codes"])
        tokenizer.codebook.ema_cluster_size = ckpt.arrays["codebook.ema_cluster_size"].copy()
        tokenizer.codebook.ema_embed_sum = ckpt.arrays["codebook.ema_embed_sum"].copy()
        return tokenizer

    def save(self, path: str, extra_config: Optional[Dict[str, object]] = None) -> str:
        config = self.config_block()
        config.update(extra_config or {})
        return save_checkpoint(path, self.state_arrays(), config)

    @classmethod
    def load(cls, path: str) -> "VQTokenizer":
        return cls.from_checkpoint(load_checkpoint(path))


def vq_loss(x: Tensor, x_rec: Tensor, h: Tensor, h_q, lambda_embed: float) -> Tensor:
    """Per-window ||x - x_rec||^2 + (lambda / L) * sum_i (1 - h_i . sg(hq_i)), averaged over windows."""
    h_q = Tensor(np.asarray(h_q.data if isinstance(h_q, Tensor) else h_q), dtype=h.dtype)
    diff = x - x_rec
    recon = (diff * diff).sum(axis=(-2, -1))
    latent_len = h.shape[-2]
    cosine = (h * h_q).sum(axis=-1)
    embed = (1.0 - cosine).sum(axis=-1) * (lambda_embed / latent_len)
    return (recon + embed).mean()


def codebook_utilization(tokenizer: VQTokenizer, windows: np.ndarray) -> float:
    tokens = tokenizer.quantize(tokenizer.encode_batches(windows))
    return float(np.unique(tokens).size / tokenizer.codebook.size)


def train_vqvae(windows: np.ndarray, config: VqConfig, seed: int, epochs: Optional[int] = None,
                checkpoint_path: Optional[str] = None) -> Tuple[VQTokenizer, List[EpochLog]]:
    """Stage-1 training with straight-through gradients, EMA codebook and dead-code reset."""
    windows = np.asarray(windows, dtype=np.float32)
    if windows.ndim != 3 or windows.shape[1:] != (config.seq_len, config.features):
        raise DimensionError(f"training windows must be (n, {config.seq_len}, {config.features}), got {windows.shape}")
    if len(windows) == 0:
        raise DataError("no training windows")
    rng = np.random.default_rng(seed)
    tokenizer = VQTokenizer(config, rng)
    params = tokenizer.encoder.parameters() + tokenizer.decoder.parameters()
    optimizer = Adam(params, lr=config.learning_rate)
    codebook = tokenizer.codebook
    n_epochs = epochs or config.epochs
    batch_size = min(config.batch_size, len(windows))
    logs: List[EpochLog] = []

    for epoch in range(1, n_epochs + 1):
        order = rng.permutation(len(windows))
        total = recon_sum = embed_sum = 0.0
        n_batches = 0
        last_latents = np.zeros((0, config.code_dim), dtype=np.float32)
        for start in range(0, len(order), batch_size):
            batch = windows[order[start:start + batch_size]]
            with Tape() as tape:
                x = Tensor(batch)
                h = tokenizer.encoder(x)
                idx = quantize(h.data, codebook)
                h_q = codebook.codes[idx]
                h_st = h + Tensor(h_q - h.data)
                x_rec = tokenizer.decoder(h_st)
                loss = vq_loss(x, x_rec, h, h_q, config.lambda_embed)
                value = loss.item()
                if not np.isfinite(value):
                    logger.error(f"VQ-VAE diverged at epoch {epoch}, batch {n_batches}: loss={value}")
                    raise DivergenceError(f"VQ-VAE loss became non-finite at epoch {epoch}")
                backward(loss, tape)
            optimizer.step()
            optimizer.zero_grad()

            flat_h = h.data.reshape(-1, config.code_dim)
            ema_update(codebook, flat_h, idx, config.ema_decay)
            codebook.usage += np.bincount(idx.reshape(-1), minlength=codebook.size)
            last_latents = flat_h

            recon = float(((batch - x_rec.data) ** 2).mean())
            total += value
            recon_sum += recon
            embed_sum += float((1.0 - (flat_h * h_q.reshape(-1, config.code_dim)).sum(-1)).mean())
            n_batches += 1

        utilization = float((codebook.usage > 0).mean())
        reset = reset_inactive_codes(codebook, last_latents, config.reset_threshold, rng)
        log = EpochLog(epoch=epoch, loss=total / n_batches, recon_mse=recon_sum / n_batches,
                       embed_loss=embed_sum / n_batches, utilization=utilization, reset_codes=len(reset))
        logs.append(log)
        logger.info(f"VQ epoch {epoch}/{n_epochs}: loss={log.loss:.5f} mse={log.recon_mse:.5f} "
                    f"util={log.utilization:.2%} reset={log.reset_codes}")

    if checkpoint_path:
        tokenizer.save(checkpoint_path)
    return tokenizer, logs
