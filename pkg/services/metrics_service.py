"""Evaluation metrics: discriminative and predictive scores, latent Frechet distance, memorization audit."""
import logging
from typing import List, Optional, Sequence

import numpy as np
from scipy.linalg import eigh, eigvalsh
from scipy.spatial.distance import cdist

from models.errors import ConfigurationError, DataError, DimensionError
from models.schemas import (
    DS_CLASSIFIER,
    FlowConfig,
    MetricConfig,
    MetricReport,
    NNAuditReport,
    NNDistanceStats,
    ScaffoldConfig,
    VqConfig,
)
from services.autodiff import Tape, Tensor, absolute, backward, concat, cross_entropy, relu
from services.dataset_service import split
from services.layers import Conv1d, Linear, Module
from services.optim import Adam
from services.pipeline_service import train_pipeline
from services.tokenizer_service import train_vqvae

# Set up logger
logger = logging.getLogger(__name__)

CLASSIFIER_NOTE = DS_CLASSIFIER
MIN_DS_WINDOWS = 50
MIN_ANCHORS = 32
KERNEL_SIZE = 3


def _as_windows(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise DimensionError(f"{name} must be (n, seq_len, features), got {x.shape}")
    if not np.isfinite(x).all():
        raise DataError(f"{name} contains non-finite values")
    return x


# ---------------------------------------------------------------------------
# Post-hoc networks
# ---------------------------------------------------------------------------

class PostHocConvNet(Module):
    """Two conv layers over time.

    ``causal=False`` pools over time into two class logits (real vs synthetic);
    ``causal=True`` left-pads every conv and emits a next-step prediction per position.
    """

    def __init__(self, features: int, hidden: int, rng: np.random.Generator, causal: bool = False):
        self.causal = causal
        pad = 0 if causal else KERNEL_SIZE // 2
        self.conv1 = Conv1d(features, hidden, KERNEL_SIZE, rng, padding=pad)
        self.conv2 = Conv1d(hidden, hidden, KERNEL_SIZE, rng, padding=pad)
        if causal:
            self.head = Conv1d(hidden, features, 1, rng)
        else:
            self.head = Linear(hidden, 2, rng)

    def _left_pad(self, h: Tensor) -> Tensor:
        zeros = Tensor(np.zeros((h.shape[0], h.shape[1], KERNEL_SIZE - 1), dtype=h.dtype))
        return concat([zeros, h], axis=2)

    def forward(self, x: Tensor) -> Tensor:
        h = x.transpose(0, 2, 1)
        if self.causal:
            h = relu(self.conv1(self._left_pad(h)))
            h = relu(self.conv2(self._left_pad(h)))
            return self.head(h).transpose(0, 2, 1)
        h = relu(self.conv2(relu(self.conv1(h))))
        return self.head(h.mean(axis=2))


def _predict_labels(net: PostHocConvNet, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [net(Tensor(x[i:i + batch_size])).data.argmax(axis=-1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def discriminative_score(real, synthetic, seed: int = 0, config: Optional[MetricConfig] = None) -> float:
    """|test accuracy - 0.5| of a classifier separating real from synthetic windows (80/20 split)."""
    config = config or MetricConfig()
    real = _as_windows(real, "real")
    synthetic = _as_windows(synthetic, "synthetic")
    if real.shape[1:] != synthetic.shape[1:]:
        raise DimensionError(f"real {real.shape[1:]} and synthetic {synthetic.shape[1:]} windows differ in shape")
    n = min(len(real), len(synthetic))
    if n < MIN_DS_WINDOWS:
        logger.error(f"Discriminative score needs {MIN_DS_WINDOWS} windows per side, got {n}")
        raise DataError(f"discriminative score needs at least {MIN_DS_WINDOWS} windows per side, got {n}")
    if len(real) != len(synthetic):
        logger.warning(f"Truncating to {n} windows per side to balance labels")

    rng = np.random.default_rng(seed)
    real = real[rng.permutation(len(real))[:n]]
    synthetic = synthetic[rng.permutation(len(synthetic))[:n]]
    n_train = int(round(0.8 * n))
    train_real, test_real = real[:n_train], real[n_train:]
    train_syn, test_syn = synthetic[:n_train], synthetic[n_train:]

    net = PostHocConvNet(real.shape[2], config.hidden, rng)
    optimizer = Adam(net.parameters(), lr=config.learning_rate)
    half = max(1, min(config.batch_size // 2, n_train))
    labels = np.concatenate([np.ones(half, dtype=np.int64), np.zeros(half, dtype=np.int64)])
    for it in range(config.iterations):
        batch = np.concatenate([train_real[rng.integers(0, n_train, half)], train_syn[rng.integers(0, n_train, half)]])
        with Tape() as tape:
            loss = cross_entropy(net(Tensor(batch)), labels)
            backward(loss, tape)
        optimizer.step()
        optimizer.zero_grad()
        if it % 100 == 0:
            logger.debug(f"DS classifier iteration {it}: loss={loss.item():.4f}")

    pred_real = _predict_labels(net, test_real)
    pred_syn = _predict_labels(net, test_syn)
    accuracy = (np.sum(pred_real == 1) + np.sum(pred_syn == 0)) / (len(pred_real) + len(pred_syn))
    ds = float(abs(accuracy - 0.5))
    logger.info(f"Discriminative score {ds:.4f} (accuracy {accuracy:.4f}, {n} windows per side, {CLASSIFIER_NOTE})")
    return ds


def _fit_predictor(train: np.ndarray, seed: int, config: MetricConfig) -> PostHocConvNet:
    rng = np.random.default_rng(seed)
    net = PostHocConvNet(train.shape[2], config.hidden, rng, causal=True)
    optimizer = Adam(net.parameters(), lr=config.learning_rate)
    batch_size = min(config.batch_size, len(train))
    for it in range(config.iterations):
        batch = train[rng.integers(0, len(train), batch_size)]
        with Tape() as tape:
            pred = net(Tensor(batch[:, :-1]))
            loss = absolute(pred - Tensor(batch[:, 1:])).mean()
            backward(loss, tape)
        optimizer.step()
        optimizer.zero_grad()
        if it % 100 == 0:
            logger.debug(f"PS predictor iteration {it}: mae={loss.item():.4f}")
    return net


def predictive_score(synthetic_train, real_test, seed: int = 0, config: Optional[MetricConfig] = None) -> float:
    """Train-on-synthetic, test-on-real mean absolute next-step error."""
    config = config or MetricConfig()
    synthetic_train = _as_windows(synthetic_train, "synthetic_train")
    real_test = _as_windows(real_test, "real_test")
    if synthetic_train.shape[1] < 2 or real_test.shape[1] < 2:
        raise DimensionError("predictive score needs windows of length >= 2")
    if synthetic_train.shape[2] != real_test.shape[2]:
        raise DimensionError(f"feature counts differ: {synthetic_train.shape[2]} vs {real_test.shape[2]}")
    net = _fit_predictor(synthetic_train, seed, config)
    errors = []
    for i in range(0, len(real_test), 256):
        batch = real_test[i:i + 256]
        errors.append(np.abs(net(Tensor(batch[:, :-1])).data - batch[:, 1:]).reshape(len(batch), -1).mean(axis=1))
    ps = float(np.concatenate(errors).mean())
    logger.info(f"Predictive score (MAE) {ps:.5f} over {len(real_test)} real windows")
    return ps


# ---------------------------------------------------------------------------
# Frechet distance
# ---------------------------------------------------------------------------

def _sqrt_psd(matrix: np.ndarray, label: str) -> np.ndarray:
    w, v = eigh((matrix + matrix.T) / 2.0)
    if w.min(initial=0.0) < -1e-10 * max(abs(w).max(initial=0.0), 1.0):
        logger.warning(f"Clipping negative eigenvalues of {label} (min {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)) via symmetric eigendecompositions."""
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    sigma1 = np.atleast_2d(np.asarray(sigma1, dtype=np.float64))
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape or sigma1.shape != (len(mu1), len(mu1)):
        raise DimensionError(f"mismatched moments: mu {mu1.shape}/{mu2.shape}, sigma {sigma1.shape}/{sigma2.shape}")
    diff = mu1 - mu2
    root1 = _sqrt_psd(sigma1, "sigma1")
    inner = root1 @ sigma2 @ root1
    w = eigvalsh((inner + inner.T) / 2.0)
    if w.min(initial=0.0) < -1e-10 * max(abs(w).max(initial=0.0), 1.0):
        logger.warning(f"Clipping negative eigenvalues of the covariance product (min {w.min():.3e})")
    tr_covmean = np.sqrt(np.clip(w, 0.0, None)).sum()
    fd = diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * tr_covmean
    return float(max(fd, 0.0))


def frechet_from_features(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature sets must be (n, d) with equal d, got {a.shape} and {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise DataError("Frechet distance needs at least two samples per side")
    return frechet_distance(a.mean(axis=0), np.cov(a, rowvar=False), b.mean(axis=0), np.cov(b, rowvar=False))


def encoder_features(tokenizer, windows: np.ndarray) -> np.ndarray:
    """Frozen encoder output, mean-pooled over latent positions."""
    return tokenizer.encode_batches(np.asarray(windows, dtype=np.float32)).mean(axis=1).astype(np.float64)


def latent_frechet_distance(real, synthetic, tokenizer) -> float:
    real = _as_windows(real, "real")
    synthetic = _as_windows(synthetic, "synthetic")
    dim = tokenizer.config.code_dim
    if min(len(real), len(synthetic)) < 2 * dim:
        logger.error(f"LFD needs {2 * dim} windows per side, got {len(real)} and {len(synthetic)}")
        raise DataError(f"latent Frechet distance needs at least {2 * dim} windows per side")
    lfd = frechet_from_features(encoder_features(tokenizer, real), encoder_features(tokenizer, synthetic))
    logger.info(f"LFD {lfd:.5f}")
    return lfd


# ---------------------------------------------------------------------------
# Memorization audit
# ---------------------------------------------------------------------------

def _nn_to(queries: np.ndarray, reference: np.ndarray, exclude_self: bool = False, chunk: int = 1024) -> np.ndarray:
    out = np.empty(len(queries))
    for start in range(0, len(queries), chunk):
        dist = cdist(queries[start:start + chunk], reference)
        if exclude_self:
            rows = np.arange(dist.shape[0])
            dist[rows, start + rows] = np.inf
        out[start:start + chunk] = dist.min(axis=1)
    return out


def _stats(values: np.ndarray) -> NNDistanceStats:
    return NNDistanceStats(mean=float(values.mean()), std=float(values.std()))


def nn_audit(train, generated, heldout=None, percentile: float = 1.0) -> NNAuditReport:
    """Exact raw-space nearest-neighbour scan against the training windows.

    The copy threshold is the given percentile of train-to-train NN distances.
    """
    train = _as_windows(train, "train").reshape(len(train), -1).astype(np.float64)
    generated = _as_windows(generated, "generated").reshape(len(generated), -1).astype(np.float64)
    if len(train) < 2:
        raise DataError("memorization audit needs at least two training windows")
    if len(train) < 100:
        logger.warning(f"Only {len(train)} training windows; the {percentile} percentile threshold is unstable")
    train_nn = _nn_to(train, train, exclude_self=True)
    threshold = float(np.percentile(train_nn, percentile))
    generated_nn = _nn_to(generated, train)
    copy_rate = float(np.mean(generated_nn <= threshold))
    heldout_stats = None
    if heldout is not None and len(heldout):
        heldout = _as_windows(heldout, "heldout").reshape(len(heldout), -1).astype(np.float64)
        heldout_stats = _stats(_nn_to(heldout, train))
    logger.info(f"NN audit: copy rate {copy_rate:.4f} at threshold {threshold:.5f} over {len(generated)} samples")
    return NNAuditReport(copy_rate=copy_rate, threshold=threshold, train_nn=_stats(train_nn),
                         heldout_nn=heldout_stats, generated_nn=_stats(generated_nn))


# ---------------------------------------------------------------------------
# Reports and protocols
# ---------------------------------------------------------------------------

def evaluate_generated(real, synthetic, tokenizer, seed: int = 0, config: Optional[MetricConfig] = None,
                       train=None, heldout=None, fraction: Optional[float] = None,
                       with_ps: bool = True) -> MetricReport:
    """DS and LFD of ``synthetic`` against ``real``, PS on ``heldout`` (or ``real``), NN audit against ``train``."""
    config = config or MetricConfig()
    ds = discriminative_score(real, synthetic, seed, config)
    ps_test = heldout if heldout is not None and len(heldout) else real
    ps = predictive_score(synthetic, ps_test, seed, config) if with_ps else None
    lfd = latent_frechet_distance(real, synthetic, tokenizer)
    audit = nn_audit(train if train is not None else real, synthetic, heldout, config.nn_percentile)
    return MetricReport(ds=ds, ps=ps, lfd=lfd, copy_rate=audit.copy_rate, nn_distance_stats=audit.generated_nn,
                        heldout_nn_stats=audit.heldout_nn, seed=seed, fraction=fraction, classifier=CLASSIFIER_NOTE)


def render_report(report: MetricReport) -> str:
    """Aligned-column text rendering, classifier note first."""
    rows = [("classifier", report.classifier), ("seed", report.seed)]
    if report.fraction is not None:
        rows.append(("fraction", report.fraction))
    rows += [("DS", report.ds), ("PS", report.ps), ("LFD", report.lfd), ("copy_rate", report.copy_rate)]
    if report.nn_distance_stats is not None:
        rows.append(("gen->train NN", f"{report.nn_distance_stats.mean:.6f} +/- {report.nn_distance_stats.std:.6f}"))
    if report.heldout_nn_stats is not None:
        rows.append(("heldout->train NN", f"{report.heldout_nn_stats.mean:.6f} +/- {report.heldout_nn_stats.std:.6f}"))
    rows += [("config_hash", report.config_hash), ("code_version", report.code_version)]
    width = max(len(k) for k, _ in rows)
    lines = []
    for key, value in rows:
        if value is None:
            value = "-"
        elif isinstance(value, float):
            value = f"{value:.6f}"
        lines.append(f"{key.ljust(width)}  {value}")
    return "\n".join(lines) + "\n"


def heldout_latent_flow_protocol(tokenizer, windows, fractions: Sequence[float], seed: int,
                                 flow_config: FlowConfig, scaffold_config: ScaffoldConfig,
                                 metric_config: Optional[MetricConfig] = None,
                                 steps: Optional[int] = None, threads: int = 1) -> List[MetricReport]:
    """Stage-2 on a fraction of the encoded windows with the full-data tokenizer held fixed.

    Fraction 1.0 trains on every window in order and is scored against all of them;
    smaller fractions are scored against the windows left out.
    """
    windows = _as_windows(windows, "windows")
    n = len(windows)
    reports = []
    for fraction in fractions:
        if not 0.0 < fraction <= 1.0:
            raise ConfigurationError(f"anchor fraction must lie in (0, 1], got {fraction}")
        n_anchor = int(round(fraction * n))
        if n_anchor < MIN_ANCHORS:
            logger.error(f"Fraction {fraction} of {n} windows gives {n_anchor} anchors")
            raise ConfigurationError(f"fraction {fraction} yields {n_anchor} anchors, fewer than {MIN_ANCHORS}")
        if n_anchor == n:
            anchored, reference = windows, windows
        else:
            perm = np.random.default_rng(seed).permutation(n)
            anchored, reference = windows[perm[:n_anchor]], windows[perm[n_anchor:]]
        pipeline, _ = train_pipeline(tokenizer, anchored, flow_config, scaffold_config, seed, steps=steps)
        generated = pipeline.generate(len(reference), seed=seed, threads=threads).series
        report = evaluate_generated(reference, generated, tokenizer, seed, metric_config, train=anchored,
                                    fraction=fraction, with_ps=False)
        logger.info(f"Held-out latent flow fraction {fraction}: DS={report.ds:.4f} LFD={report.lfd:.4f} "
                    f"copy={report.copy_rate:.4f}")
        reports.append(report)
    return reports


def strict_heldout_check(dataset, seed: int, vq_config: VqConfig, flow_config: FlowConfig,
                         scaffold_config: ScaffoldConfig, metric_config: Optional[MetricConfig] = None,
                         fraction: float = 0.2, steps: Optional[int] = None, epochs: Optional[int] = None,
                         threads: int = 1) -> MetricReport:
    """Tokenizer and Stage-2 trained on the train split only, scored on the unseen split."""
    if not len(dataset.heldout()):
        dataset = split(dataset, fraction, seed)
    train, heldout = dataset.train(), dataset.heldout()
    tokenizer, _ = train_vqvae(train, vq_config, seed, epochs=epochs)
    pipeline, _ = train_pipeline(tokenizer, train, flow_config, scaffold_config, seed, steps=steps)
    generated = pipeline.generate(len(heldout), seed=seed, threads=threads).series
    report = evaluate_generated(heldout, generated, tokenizer, seed, metric_config, train=train, heldout=heldout,
                                fraction=1.0 - fraction)
    logger.info(f"Strict held-out check: DS={report.ds:.4f} LFD={report.lfd:.4f} copy={report.copy_rate:.4f}")
    return report
