import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax as np_softmax

from models.errors import ConfigurationError, DimensionError, DivergenceError, ParameterError
from models.schemas import FlowConfig, FlowObjective, PriorFamily, ScaffoldBasis, ScaffoldConfig, StepLosses, TimeDistribution
from services.autodiff import Tape, Tensor, backward, cross_entropy, silu, softmax
from services.layers import AdaLN, AttentionBlock, Linear, Module, Parameter, prepend_token
from services.optim import Adam
from services.scaffold_service import (
    AnchorPrior,
    AnchorScaffold,
    anchor_init,
    build_prior,
    coord_reg_terms,
    init_scaffold,
    sample_anchor,
    sample_interpolation,
    svd_scaffold,
)
from services.tokenizer_service import VQTokenizer, quantize

# Set up logger
logger = logging.getLogger(__name__)

BETA_A, BETA_B = 2.0, 5.0


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(np.float32)


class FlowNetwork(Module):
    """Transformer over latent positions with a prepended global token and AdaLN time conditioning."""

    def __init__(self, config: FlowConfig, codebook_size: int, latent_len: int, code_dim: int, rng: np.random.Generator):
        d = config.d_model
        self.config = config
        self.codebook_size = codebook_size
        self.latent_len = latent_len
        self.code_dim = code_dim
        self.time_dim = d // 4
        self.input_proj = Linear(code_dim, d, rng)
        self.pos_embed = Parameter(rng.normal(0.0, 0.02, size=(latent_len, d)))
        self.global_token = Parameter(rng.normal(0.0, 0.02, size=(1, d)))
        self.time_in = Linear(self.time_dim, d, rng)
        self.time_out = Linear(d, d, rng)
        self.blocks = [AttentionBlock(d, config.heads, rng, d_cond=d) for _ in range(config.layers)]
        self.final_norm = AdaLN(d, d, rng)
        self.head = Linear(d, codebook_size, rng)

    def forward(self, z_t: Tensor, t) -> Tensor:
        if z_t.ndim != 3 or z_t.shape[1:] != (self.latent_len, self.code_dim):
            raise DimensionError(f"flow input must be (B, {self.latent_len}, {self.code_dim}), got {z_t.shape}")
        batch = z_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        temb = Tensor(sinusoidal_embedding(t, self.time_dim), dtype=z_t.dtype)
        cond = self.time_out(silu(self.time_in(temb)))
        x = prepend_token(self.global_token, self.input_proj(z_t) + self.pos_embed)
        for block in self.blocks:
            x = block(x, cond)
        x = self.final_norm(x, cond)
        return self.head(x[:, 1:, :])


@dataclass
class FlowState:
    z: np.ndarray
    t: float


@dataclass
class CategoricalPosterior:
    logits: np.ndarray
    temperature: float = 1.0

    def probabilities(self) -> np.ndarray:
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")
        return np_softmax(np.asarray(self.logits, dtype=np.float64) / self.temperature, axis=-1)


def posterior_logits(state: FlowState, network: FlowNetwork) -> np.ndarray:
    z = np.asarray(state.z, dtype=np.float32)
    single = z.ndim == 2
    zb = z[None] if single else z
    logits = network(Tensor(zb), state.t).data
    return logits[0] if single else logits


def posterior_mean(probs: np.ndarray, codes: np.ndarray) -> np.ndarray:
    return np.asarray(probs, dtype=np.float64) @ np.asarray(codes, dtype=np.float64)


def velocity(state: FlowState, posterior, codes: np.ndarray, delta: float) -> np.ndarray:
    """(mu - z_t) / max(1 - t, delta) with mu the posterior-mean embedding."""
    probs = posterior.probabilities() if isinstance(posterior, CategoricalPosterior) else np.asarray(posterior)
    mu = posterior_mean(probs, codes)
    t = np.asarray(state.t, dtype=np.float64)
    denom = np.maximum(1.0 - t, delta)
    if denom.ndim:
        denom = denom.reshape(-1, *([1] * (mu.ndim - 1)))
    return (mu - np.asarray(state.z, dtype=np.float64)) / denom


def sample_time(time_dist: TimeDistribution, rng: np.random.Generator, delta: float, size=None) -> np.ndarray:
    if TimeDistribution(time_dist) == TimeDistribution.COSINE:
        t = 1.0 - np.cos(0.5 * np.pi * rng.uniform(size=size))
    else:
        t = rng.beta(BETA_A, BETA_B, size=size)
    return np.clip(t, 0.0, 1.0 - delta)


def ce_loss(logits: Tensor, targets: np.ndarray, temperature: float = 1.0) -> Tensor:
    return cross_entropy(logits, targets, temperature)


def mse_loss(logits: Tensor, target_latents: np.ndarray, codes: np.ndarray, temperature: float = 1.0) -> Tensor:
    """Mean per-position squared error between the posterior-mean embedding and the target code."""
    mu = softmax(logits, temperature) @ Tensor(codes, dtype=logits.dtype)
    diff = mu - Tensor(target_latents, dtype=logits.dtype)
    return (diff * diff).sum(axis=-1).mean()


@dataclass
class FlowOptimizers:
    network: Adam
    scaffold: Optional[Adam] = None

    def step(self):
        self.network.step()
        if self.scaffold is not None:
            self.scaffold.step()

    def zero_grad(self):
        self.network.zero_grad()
        if self.scaffold is not None:
            self.scaffold.zero_grad()


def make_optimizers(network: FlowNetwork, scaffold: AnchorScaffold, flow_config: FlowConfig) -> FlowOptimizers:
    scaffold_opt = None
    anchored = scaffold.config.prior != PriorFamily.GAUSSIAN
    if anchored and scaffold.trainable:
        scaffold_opt = Adam(scaffold.parameters(), lr=scaffold.config.learning_rate)
    return FlowOptimizers(Adam(network.parameters(), lr=flow_config.learning_rate), scaffold_opt)


def train_step(step: int, rows: np.ndarray, scaffold: AnchorScaffold, codes: np.ndarray, network: FlowNetwork,
               optimizers: FlowOptimizers, rng: np.random.Generator, flow_config: FlowConfig,
               tokens: np.ndarray) -> StepLosses:
    """One update of the network and (for learned anchors) the scaffold factors.

    ``tokens`` holds the target index sequences of every owned row; the batch
    is ``tokens[rows]``.
    """
    rows = np.asarray(rows)
    targets = tokens[rows]
    z1 = codes[targets].astype(np.float32)
    batch = len(rows)
    delta = flow_config.delta()
    t = sample_time(flow_config.time_dist, rng, delta, size=batch)
    tt = t.reshape(batch, 1, 1).astype(np.float32)
    cfg = scaffold.config
    anchored = cfg.prior != PriorFamily.GAUSSIAN

    with Tape() as tape:
        if anchored:
            z0 = scaffold.initial_latents(rows)
        else:
            z0 = Tensor(rng.standard_normal(z1.shape).astype(np.float32))
        z_t = z0 * Tensor(1.0 - tt) + Tensor(tt * z1)
        logits = network(z_t, t)
        if flow_config.objective == FlowObjective.MSE:
            main = mse_loss(logits, z1, codes, flow_config.tau_train)
        else:
            main = ce_loss(logits, targets, flow_config.tau_train)
        total = main
        reg_mu = reg_sigma = 0.0
        if anchored and scaffold.trainable:
            mu_term, sigma_term = coord_reg_terms(scaffold.U)
            total = main + cfg.lambda_mu * mu_term + cfg.lambda_sigma * sigma_term
            reg_mu, reg_sigma = mu_term.item(), sigma_term.item()
        value = total.item()
        if not np.isfinite(value):
            logger.error(f"Flow training diverged at step {step}: loss={value}")
            raise DivergenceError(f"flow loss became non-finite at step {step}")
        backward(total, tape)

    optimizers.step()
    optimizers.zero_grad()
    return StepLosses(step=step, total=value, main=main.item(), reg_mu=reg_mu, reg_sigma=reg_sigma,
                      objective=flow_config.objective)


@dataclass
class FlowTrainingResult:
    network: FlowNetwork
    scaffold: AnchorScaffold
    prior: AnchorPrior
    history: List[StepLosses] = field(default_factory=list)


def train_flow(tokens: np.ndarray, codes: np.ndarray, flow_config: FlowConfig, scaffold_config: ScaffoldConfig,
               seed: int, steps: Optional[int] = None) -> FlowTrainingResult:
    """Stage-2 training over frozen token sequences (M, L)."""
    tokens = np.asarray(tokens)
    codes = np.asarray(codes, dtype=np.float32)
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be (M, L), got {tokens.shape}")
    M, latent_len = tokens.shape
    K, code_dim = codes.shape
    rng = np.random.default_rng(seed)
    if scaffold_config.basis == ScaffoldBasis.SVD:
        scaffold = svd_scaffold(codes[tokens], scaffold_config.rank, scaffold_config)
    else:
        scaffold = init_scaffold(M, scaffold_config.rank, latent_len, code_dim, rng, scaffold_config)
    network = FlowNetwork(flow_config, K, latent_len, code_dim, rng)
    optimizers = make_optimizers(network, scaffold, flow_config)

    n_steps = steps or flow_config.train_steps
    batch = min(flow_config.batch_size, M)
    history: List[StepLosses] = []
    for step in range(1, n_steps + 1):
        rows = rng.choice(M, size=batch, replace=False)
        losses = train_step(step, rows, scaffold, codes, network, optimizers, rng, flow_config, tokens)
        history.append(losses)
        if step == 1 or step % 100 == 0 or step == n_steps:
            logger.info(f"Flow step {step}/{n_steps}: total={losses.total:.4f} {losses.objective.value}={losses.main:.4f} "
                        f"reg_mu={losses.reg_mu:.4f} reg_sigma={losses.reg_sigma:.4f}")
        else:
            logger.debug(f"Flow step {step}: total={losses.total:.4f}")
    prior = build_prior(scaffold)
    stats = prior.coordinate_stats()
    logger.info(f"Anchor prior: M={prior.M} h={prior.bandwidth:.4f} d_nn={prior.mean_nn_distance:.4f} "
                f"|u_bar|={stats['mean_norm']:.4f} std={stats['global_std']:.4f}")
    return FlowTrainingResult(network=network, scaffold=scaffold, prior=prior, history=history)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@dataclass
class GenerationResult:
    tokens: np.ndarray
    series: np.ndarray
    steps_taken: int
    latents: np.ndarray


def spawn_rngs(seed: int, n: int) -> List[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def draw_initial(scaffold: AnchorScaffold, prior: AnchorPrior, family: PriorFamily, rng: np.random.Generator) -> np.ndarray:
    family = PriorFamily(family)
    if family == PriorFamily.GAUSSIAN:
        return rng.standard_normal((scaffold.latent_len, scaffold.code_dim))
    if family == PriorFamily.INTERPOLATION:
        u = sample_interpolation(prior, rng)
    else:
        u = sample_anchor(prior, rng)
    return anchor_init(u, scaffold.V.data, scaffold.latent_len, scaffold.code_dim,
                       scaffold.config.normalization, rng)


PosteriorFn = Callable[[np.ndarray, float], np.ndarray]


def network_posterior(network: FlowNetwork, tau: float) -> PosteriorFn:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")

    def _probs(z: np.ndarray, t: float) -> np.ndarray:
        logits = network(Tensor(z.astype(np.float32)), t).data
        return np_softmax(logits.astype(np.float64) / tau, axis=-1)

    return _probs


def integrate(z0: np.ndarray, posterior_fn: PosteriorFn, codes: np.ndarray, steps: int, delta: float,
              prefix: Optional[np.ndarray] = None, snapshots: Sequence[int] = ()) -> Tuple[np.ndarray, int, Dict[int, np.ndarray]]:
    """Euler integration of the posterior-mean field from t=0 over ``steps`` uniform steps.

    ``prefix`` (B, P, d_c) is written over the first P positions before each
    evaluation and after the last step.
    """
    z = np.array(z0, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    taken = 0
    recorded = {}
    if 0 in snapshots:
        recorded[0] = z.copy()
    for s in range(steps):
        if prefix is not None:
            z[:, :prefix.shape[1]] = prefix
        t = s / steps
        v = velocity(FlowState(z, t), posterior_fn(z, t), codes, delta)
        z = z + v / steps
        taken += 1
        if taken in snapshots:
            recorded[taken] = z.copy()
    if prefix is not None:
        z[:, :prefix.shape[1]] = prefix
    return z, taken, recorded


def _generate_chunk(rngs, scaffold, prior, tokenizer, network, steps, tau, family, delta):
    z0 = np.stack([draw_initial(scaffold, prior, family, rng) for rng in rngs])
    z, taken, _ = integrate(z0, network_posterior(network, tau), tokenizer.codebook.codes, steps, delta)
    tokens = quantize(z, tokenizer.codebook)
    return tokens, tokenizer.decode(tokenizer.dequantize(tokens)), taken, z


def euler_generate(n_samples: int, scaffold: AnchorScaffold, prior: AnchorPrior, tokenizer: VQTokenizer,
                   network: FlowNetwork, steps: int, tau: float = 1.0, seed: int = 0,
                   rngs: Optional[Sequence[np.random.Generator]] = None, family: PriorFamily = PriorFamily.ANCHOR,
                   delta: Optional[float] = None, threads: int = 1, chunk_size: int = 64) -> GenerationResult:
    """Draw z0 from the prior, integrate S Euler steps, quantize per position and decode.

    Every sample owns an RNG stream, so chunking and threading do not change
    the samples.
    """
    if rngs is None:
        rngs = spawn_rngs(seed, n_samples)
    rngs = list(rngs)
    if len(rngs) != n_samples:
        raise ConfigurationError(f"need {n_samples} RNG streams, got {len(rngs)}")
    if delta is None:
        delta = 1.0 / steps if steps > 0 else 1.0
    chunks = [rngs[i:i + chunk_size] for i in range(0, n_samples, chunk_size)]
    args = (scaffold, prior, tokenizer, network, steps, tau, family, delta)
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _generate_chunk(c, *args), chunks))
    else:
        parts = [_generate_chunk(c, *args) for c in chunks]
    taken = parts[0][2] if parts else 0
    logger.info(f"Generated {n_samples} samples with {taken} Euler steps (tau={tau}, family={PriorFamily(family).value})")
    return GenerationResult(
        tokens=np.concatenate([p[0] for p in parts]),
        series=np.concatenate([p[1] for p in parts]),
        steps_taken=taken,
        latents=np.concatenate([p[3] for p in parts]),
    )


def kde_only_generate(n_samples: int, scaffold: AnchorScaffold, prior: AnchorPrior, tokenizer: VQTokenizer,
                      network: Optional[FlowNetwork] = None, seed: int = 0, **kwargs) -> GenerationResult:
    """Quantize and decode prior draws directly: the S=0 path of ``euler_generate``."""
    return euler_generate(n_samples, scaffold, prior, tokenizer, network, steps=0, seed=seed, **kwargs)


@dataclass
class ForecastResult:
    series: np.ndarray
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    draws: Optional[np.ndarray] = None


def forecast(history: np.ndarray, scaffold: AnchorScaffold, prior: AnchorPrior, tokenizer: VQTokenizer,
             network: FlowNetwork, steps: int, tau: float = 1.0, seed: int = 0, n_draws: int = 1,
             family: PriorFamily = PriorFamily.ANCHOR) -> ForecastResult:
    """Complete windows from their first half.

    The encoded history overwrites the first L/2 latent positions at every
    Euler step and the literal history replaces the first half of the output.
    """
    history = np.asarray(history, dtype=np.float32)
    single = history.ndim == 2
    hb = history[None] if single else history
    cfg = tokenizer.config
    if tokenizer.latent_len % 2 != 0:
        logger.error(f"Forecast needs an even latent length, got L={tokenizer.latent_len}")
        raise ConfigurationError(f"forecasting requires an even latent length, got L={tokenizer.latent_len}")
    half = cfg.seq_len // 2
    if hb.shape[1:] != (half, cfg.features):
        raise DimensionError(f"history must be ({half}, {cfg.features}) per window, got {hb.shape[1:]}")

    prefix_tokens = tokenizer.quantize(tokenizer.encode_prefix(hb))
    prefix = tokenizer.dequantize(prefix_tokens).astype(np.float64)
    n = len(hb)
    delta = 1.0 / steps if steps > 0 else 1.0
    posterior_fn = network_posterior(network, tau)
    draws = []
    for d in range(n_draws):
        rngs = spawn_rngs(seed + d, n)
        z0 = np.stack([draw_initial(scaffold, prior, family, rng) for rng in rngs])
        z, _, _ = integrate(z0, posterior_fn, tokenizer.codebook.codes, steps, delta, prefix=prefix)
        series = tokenizer.decode(tokenizer.dequantize(quantize(z, tokenizer.codebook)))
        series[:, :half] = hb
        draws.append(series)
    draws = np.stack(draws)
    if n_draws == 1:
        result = ForecastResult(series=draws[0], draws=draws)
    else:
        result = ForecastResult(series=np.median(draws, axis=0), lower=np.percentile(draws, 10, axis=0),
                                upper=np.percentile(draws, 90, axis=0), draws=draws)
        result.series[:, :half] = hb
    if single:
        result.series = result.series[0]
        if result.lower is not None:
            result.lower, result.upper = result.lower[0], result.upper[0]
    return result


def interval_coverage(truth: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> float:
    truth = np.asarray(truth)
    return float(np.mean((truth >= lower) & (truth <= upper)))
