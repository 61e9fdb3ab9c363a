from enum import Enum
from datetime import datetime
from typing import Optional, List, Dict
from pydantic import BaseModel, Field, field_validator, model_validator

class TimeDistribution(str, Enum):
    BETA = "beta"
    COSINE = "cosine"

class Normalization(str, Enum):
    ROW = "row"
    GLOBAL = "global"

class ScaffoldBasis(str, Enum):
    LEARNED = "learned"
    SVD = "svd"

class PriorFamily(str, Enum):
    ANCHOR = "anchor"
    GAUSSIAN = "gaussian"
    INTERPOLATION = "interpolation"

class FlowObjective(str, Enum):
    CE = "ce"
    MSE = "mse"

class GenerationMode(str, Enum):
    FLOW = "flow"
    KDE_ONLY = "kde_only"

class AnalysisKind(str, Enum):
    SPECTRUM = "spectrum"
    TRANSPORT = "transport"
    PINSKER = "pinsker"
    KDE_RATE = "kde-rate"

class AblationAxis(str, Enum):
    PRIOR = "prior"
    RANK = "rank"
    BANDWIDTH = "bandwidth"
    STEPS = "steps"
    HELDOUT_FRACTION = "heldout-fraction"
    OBJECTIVE = "objective"

DS_CLASSIFIER = "conv1d-2layer+pool"

class SplitTag(str, Enum):
    TRAIN = "train"
    HELDOUT = "heldout"

class RunStatus(str, Enum):
    RUNNING = "running"
    SUCCEEDED = "succeeded"
    CHECKS_FAILED = "checks_failed"
    ERROR = "error"


def _split_list(value):
    """Accept comma-separated strings from the flat config file."""
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


# ---------------------------------------------------------------------------
# Configuration sections
# ---------------------------------------------------------------------------

class DatasetConfig(BaseModel):
    source: str = "sines"
    n_windows: int = Field(2000, ge=1)
    seq_len: int = Field(24, ge=1)
    features: int = Field(5, ge=1)
    stride: int = Field(1, ge=1)
    heldout_fraction: float = Field(0.2, ge=0.0, lt=1.0)
    debug: bool = False

class VqConfig(BaseModel):
    """Stage-1 tokenizer. Defaults are desk scale; see ``full_scale`` for the full-size preset."""
    seq_len: int = Field(24, ge=1)
    features: int = Field(5, ge=1)
    downsample: int = Field(4, ge=1)
    codebook_size: int = Field(64, ge=1)
    code_dim: int = Field(64, ge=1)
    hidden: int = Field(64, ge=1)
    enc_dec_layers: int = Field(2, ge=1)
    lambda_embed: float = Field(0.5, gt=0.0)
    ema_decay: float = Field(0.99, gt=0.0, lt=1.0)
    reset_threshold: int = Field(0, ge=0)
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)

    @model_validator(mode="after")
    def check_downsample(self):
        if self.seq_len % self.downsample != 0:
            raise ValueError(f"seq_len {self.seq_len} is not divisible by downsample {self.downsample}")
        return self

    @property
    def latent_len(self) -> int:
        return self.seq_len // self.downsample

    @classmethod
    def full_scale(cls, **overrides) -> "VqConfig":
        values = dict(hidden=512, enc_dec_layers=2, codebook_size=512, code_dim=512, downsample=4)
        values.update(overrides)
        return cls(**values)

class ScaffoldConfig(BaseModel):
    rank: int = Field(32, ge=1)
    lambda_mu: float = Field(0.1, ge=0.0)
    lambda_sigma: float = Field(10.0, ge=0.0)
    alpha: float = Field(0.02, gt=0.0)
    bandwidth: Optional[float] = Field(None, gt=0.0)
    normalization: Normalization = Normalization.ROW
    basis: ScaffoldBasis = ScaffoldBasis.LEARNED
    prior: PriorFamily = PriorFamily.ANCHOR
    learning_rate: float = Field(1e-3, gt=0.0)
    anchor_fraction: float = Field(1.0, gt=0.0, le=1.0)

class FlowConfig(BaseModel):
    d_model: int = Field(64, ge=8)
    layers: int = Field(1, ge=1)
    heads: int = Field(4, ge=1)
    tau_train: float = Field(1.0, gt=0.0)
    tau_infer: float = Field(1.0, gt=0.0)
    ode_steps: int = Field(20, ge=1)
    time_dist: TimeDistribution = TimeDistribution.BETA
    t_clamp: Optional[float] = Field(None, gt=0.0, lt=1.0)
    objective: FlowObjective = FlowObjective.CE
    learning_rate: float = Field(1e-4, gt=0.0)
    train_steps: int = Field(2000, ge=1)
    batch_size: int = Field(64, ge=1)

    @model_validator(mode="after")
    def check_heads(self):
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if self.d_model % 8 != 0:
            raise ValueError(f"d_model {self.d_model} must be a multiple of 8 for the time embedding")
        return self

    def delta(self, steps: Optional[int] = None) -> float:
        """Singularity clamp: explicit t_clamp, otherwise 1/S."""
        if self.t_clamp is not None:
            return self.t_clamp
        return 1.0 / (steps or self.ode_steps)

    @classmethod
    def full_scale(cls, latent_len: int, **overrides) -> "FlowConfig":
        if latent_len <= 6:
            values = dict(d_model=512, layers=1, heads=16)
        else:
            values = dict(d_model=1024, layers=3, heads=16)
        values.update(overrides)
        return cls(**values)

class MetricConfig(BaseModel):
    hidden: int = Field(32, ge=1)
    iterations: int = Field(400, ge=1)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    nn_percentile: float = Field(1.0, gt=0.0, lt=100.0)

class AblationConfig(BaseModel):
    seeds: int = Field(5, ge=1)
    ranks: List[int] = [4, 8, 16, 32]
    bandwidths: List[float] = [0.01, 0.06, 0.12, 0.60]
    steps: List[int] = [10, 20, 50]
    fractions: List[float] = [0.1, 0.2, 0.5, 1.0]

    @field_validator("ranks", "bandwidths", "steps", "fractions", mode="before")
    @classmethod
    def parse_lists(cls, value):
        return _split_list(value)

class AnalysisConfig(BaseModel):
    transport_trials: int = Field(100000, ge=1)
    transport_dims: List[int] = [128, 512, 2048]
    transport_rank: int = Field(8, ge=1)
    transport_h: float = Field(0.1, ge=0.0)
    transport_epsilon: float = Field(0.05, ge=0.0)
    pinsker_instances: int = Field(100000, ge=1)
    velocity_instances: int = Field(10000, ge=1)
    kde_replicates: int = Field(10, ge=1)
    kde_ranks: List[int] = [1, 2]
    kde_grid_1d: int = Field(2048, ge=16)
    kde_grid_2d: int = Field(512, ge=16)
    kde_bandwidth_scale: float = Field(0.8, gt=0.0)
    spectrum_samples: int = Field(256, ge=2)
    spectrum_threshold: float = Field(0.9, gt=0.0, le=1.0)

    @field_validator("transport_dims", "kde_ranks", mode="before")
    @classmethod
    def parse_lists(cls, value):
        return _split_list(value)

class ExperimentConfig(BaseModel):
    """Fully resolved configuration of one command invocation."""
    seed: int = 0
    out: str = "runs"
    threads: int = Field(1, ge=1)
    data: DatasetConfig = DatasetConfig()
    vq: VqConfig = VqConfig()
    scaffold: ScaffoldConfig = ScaffoldConfig()
    flow: FlowConfig = FlowConfig()
    metrics: MetricConfig = MetricConfig()
    ablate: AblationConfig = AblationConfig()
    analyze: AnalysisConfig = AnalysisConfig()


# ---------------------------------------------------------------------------
# Training and evaluation records
# ---------------------------------------------------------------------------

class EpochLog(BaseModel):
    epoch: int
    loss: float
    recon_mse: float
    embed_loss: float
    utilization: float
    reset_codes: int = 0

class StepLosses(BaseModel):
    step: int
    total: float
    main: float
    reg_mu: float
    reg_sigma: float
    objective: FlowObjective = FlowObjective.CE

class NNDistanceStats(BaseModel):
    mean: float
    std: float

class NNAuditReport(BaseModel):
    copy_rate: float = Field(ge=0.0, le=1.0)
    threshold: float
    train_nn: NNDistanceStats
    heldout_nn: Optional[NNDistanceStats] = None
    generated_nn: NNDistanceStats

class MetricReport(BaseModel):
    ds: float = Field(ge=0.0, le=0.5)
    ps: Optional[float] = None
    lfd: float = Field(ge=0.0)
    copy_rate: Optional[float] = None
    nn_distance_stats: Optional[NNDistanceStats] = None
    heldout_nn_stats: Optional[NNDistanceStats] = None
    seed: int
    fraction: Optional[float] = None
    classifier: str = DS_CLASSIFIER
    config_hash: Optional[str] = None
    code_version: Optional[str] = None

class SpectrumReport(BaseModel):
    singular_values: List[float]
    cumulative_variance: List[float]
    effective_rank: int
    threshold: float
    label: Optional[str] = None
    t: Optional[float] = None

class TransportResult(BaseModel):
    branch: str
    D: int
    r: Optional[int] = None
    C: float = 0.0
    epsilon: float = 0.0
    h: float = 0.0
    estimate: float
    std_err: float
    bound: float
    holds: bool

class BoundCheck(BaseModel):
    lhs: float
    rhs: float
    holds: bool

class KdeRateResult(BaseModel):
    r: int
    n_grid: List[int]
    mise: List[float]
    slope: float
    replicate_slopes: List[float]
    target: float
    holds: bool

class AblationRow(BaseModel):
    axis: AblationAxis
    setting: str
    ds_mean: float
    ds_std: float
    lfd_mean: float
    lfd_std: float
    n_seeds: int

class CommandResult(BaseModel):
    command: str
    checks: Dict[str, bool] = {}
    metrics: Dict[str, float] = {}
    outputs: Dict[str, str] = {}

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

class RunRecord(BaseModel):
    id: int
    command: str
    seed: int
    config_hash: Optional[str] = None
    code_version: Optional[str] = None
    out_dir: Optional[str] = None
    status: RunStatus
    exit_code: Optional[int] = None
    started_at: Optional[datetime] = None
    finished_at: Optional[datetime] = None
    metrics: Dict[str, float] = {}

    class Config:
        from_attributes = True
