import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from models.errors import ConfigurationError, ContractError
from models.schemas import FlowConfig, GenerationMode, PriorFamily, ScaffoldConfig, StepLosses
from services.checkpoint_service import Checkpoint, arrays_fingerprint, load_checkpoint, save_checkpoint
from services.flow_service import (
    FlowNetwork,
    ForecastResult,
    GenerationResult,
    euler_generate,
    forecast,
    kde_only_generate,
    train_flow,
)
from services.scaffold_service import AnchorPrior, AnchorScaffold
from services.tokenizer_service import VQTokenizer

# Set up logger
logger = logging.getLogger(__name__)


def _section(config: Dict[str, str], prefix: str) -> Dict[str, str]:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in config.items() if k.startswith(prefix + ".") and v != "none"}


@dataclass
class SDFlowPipeline:
    """Frozen tokenizer plus the Stage-2 network, scaffold and anchor prior."""
    tokenizer: VQTokenizer
    network: FlowNetwork
    scaffold: AnchorScaffold
    prior: AnchorPrior
    flow_config: FlowConfig
    scaffold_config: ScaffoldConfig

    @property
    def family(self) -> PriorFamily:
        return self.scaffold_config.prior

    def generate(self, n_samples: int, steps: Optional[int] = None, tau: Optional[float] = None, seed: int = 0,
                 mode: GenerationMode = GenerationMode.FLOW, threads: int = 1,
                 family: Optional[PriorFamily] = None) -> GenerationResult:
        family = family or self.family
        if GenerationMode(mode) == GenerationMode.KDE_ONLY:
            return kde_only_generate(n_samples, self.scaffold, self.prior, self.tokenizer, self.network,
                                     seed=seed, family=family, threads=threads)
        steps = steps if steps is not None else self.flow_config.ode_steps
        tau = tau if tau is not None else self.flow_config.tau_infer
        delta = self.flow_config.delta(steps)
        return euler_generate(n_samples, self.scaffold, self.prior, self.tokenizer, self.network, steps, tau,
                              seed=seed, family=family, delta=delta, threads=threads)

    def forecast(self, history: np.ndarray, steps: Optional[int] = None, tau: Optional[float] = None,
                 seed: int = 0, n_draws: int = 1) -> ForecastResult:
        steps = steps if steps is not None else self.flow_config.ode_steps
        tau = tau if tau is not None else self.flow_config.tau_infer
        return forecast(history, self.scaffold, self.prior, self.tokenizer, self.network, steps, tau,
                        seed=seed, n_draws=n_draws, family=self.family)

    def with_bandwidth(self, bandwidth: float) -> "SDFlowPipeline":
        prior = AnchorPrior(self.prior.coords, self.prior.alpha, bandwidth)
        config = self.scaffold_config.model_copy(update={"bandwidth": bandwidth})
        return SDFlowPipeline(self.tokenizer, self.network, self.scaffold, prior, self.flow_config, config)

    def with_family(self, family: PriorFamily) -> "SDFlowPipeline":
        config = self.scaffold_config.model_copy(update={"prior": PriorFamily(family)})
        return SDFlowPipeline(self.tokenizer, self.network, self.scaffold, self.prior, self.flow_config, config)

    def config_block(self) -> Dict[str, object]:
        config = self.tokenizer.config_block()
        config.update({f"flow.{k}": v for k, v in self.flow_config.model_dump().items()})
        config.update({f"scaffold.{k}": v for k, v in self.scaffold_config.model_dump().items()})
        config["prior.alpha"] = self.prior.alpha
        config["prior.bandwidth"] = self.prior.bandwidth
        config["prior.mean_nn_distance"] = self.prior.mean_nn_distance
        config["prior.anchors"] = self.prior.M
        return config

    def save(self, path: str, extra_config: Optional[Dict[str, object]] = None) -> str:
        arrays = self.tokenizer.state_arrays()
        arrays.update({f"flow.{k}": v for k, v in self.network.state_dict().items()})
        arrays["scaffold.U"] = self.scaffold.U.data.copy()
        arrays["scaffold.V"] = self.scaffold.V.data.copy()
        config = self.config_block()
        config.update(extra_config or {})
        return save_checkpoint(path, arrays, config)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "SDFlowPipeline":
        if "scaffold.U" not in ckpt.arrays:
            raise ConfigurationError("checkpoint has no Stage-2 arrays")
        tokenizer = VQTokenizer.from_checkpoint(ckpt)
        try:
            flow_config = FlowConfig(**_section(ckpt.config, "flow"))
            scaffold_config = ScaffoldConfig(**_section(ckpt.config, "scaffold"))
        except Exception as e:
            raise ConfigurationError(f"checkpoint carries an invalid Stage-2 config: {str(e)}")
        cfg = tokenizer.config
        network = FlowNetwork(flow_config, cfg.codebook_size, cfg.latent_len, cfg.code_dim, np.random.default_rng(0))
        network.load_state_dict(ckpt.subset("flow"))
        scaffold = AnchorScaffold(ckpt.arrays["scaffold.U"], ckpt.arrays["scaffold.V"], cfg.latent_len,
                                  cfg.code_dim, scaffold_config)
        prior = AnchorPrior(scaffold.coordinates(), float(ckpt.config.get("prior.alpha", scaffold_config.alpha)),
                            scaffold_config.bandwidth)
        return cls(tokenizer, network, scaffold, prior, flow_config, scaffold_config)

    @classmethod
    def load(cls, path: str) -> "SDFlowPipeline":
        return cls.from_checkpoint(load_checkpoint(path))


def check_compatibility(tokenizer: VQTokenizer, tokens: np.ndarray):
    cfg = tokenizer.config
    if tokens.ndim != 2 or tokens.shape[1] != cfg.latent_len:
        raise ConfigurationError(f"token sequences of shape {tokens.shape} do not match latent length L={cfg.latent_len}")
    if tokenizer.codebook.codes.shape != (cfg.codebook_size, cfg.code_dim):
        raise ConfigurationError(f"codebook shape {tokenizer.codebook.codes.shape} does not match K={cfg.codebook_size}, d_c={cfg.code_dim}")


def tokenizer_fingerprint(tokenizer: VQTokenizer) -> str:
    return arrays_fingerprint(tokenizer.state_arrays())


def train_pipeline(tokenizer: VQTokenizer, windows: np.ndarray, flow_config: FlowConfig,
                   scaffold_config: ScaffoldConfig, seed: int,
                   steps: Optional[int] = None) -> Tuple[SDFlowPipeline, List[StepLosses]]:
    """Stage-2 training on the frozen tokenizer's tokens for ``windows``.

    One scaffold coordinate row is owned per window.
    """
    before = tokenizer_fingerprint(tokenizer)
    tokens = tokenizer.quantize(tokenizer.encode_batches(windows))
    check_compatibility(tokenizer, tokens)
    result = train_flow(tokens, tokenizer.codebook.codes, flow_config, scaffold_config, seed, steps=steps)
    if tokenizer_fingerprint(tokenizer) != before:
        logger.error("Stage-2 training modified Stage-1 parameters")
        raise ContractError("Stage-2 training modified the frozen tokenizer")
    pipeline = SDFlowPipeline(tokenizer, result.network, result.scaffold, result.prior, flow_config, scaffold_config)
    return pipeline, result.history
