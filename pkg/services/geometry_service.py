"""Double-precision numerical checks of the transport, posterior-bound and KDE-rate claims."""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import qr, svdvals
from scipy.special import rel_entr
from scipy.stats import norm

from models.errors import ConfigurationError, DimensionError
from models.schemas import BoundCheck, KdeRateResult, SpectrumReport, TransportResult
from services.flow_service import integrate, network_posterior, spawn_rngs, draw_initial
from services.tokenizer_service import quantize

# Set up logger
logger = logging.getLogger(__name__)

DataSampler = Callable[[int, np.random.Generator], np.ndarray]

DEFAULT_N_GRID = (100, 250, 500, 1000, 2500, 5000, 10000)
SLOPE_TOLERANCE = 0.25
MIXTURE_MEANS = (-1.5, 1.5)
MIXTURE_STD = 1.0


# ---------------------------------------------------------------------------
# Transport distances
# ---------------------------------------------------------------------------

def semi_orthogonal(D: int, r: int, rng: np.random.Generator) -> np.ndarray:
    if r > D:
        raise ConfigurationError(f"rank {r} exceeds ambient dimension {D}")
    q, _ = qr(rng.standard_normal((D, r)), mode="economic")
    return q


def zero_sampler(D: int) -> DataSampler:
    return lambda n, rng: np.zeros((n, D))


def unit_sphere_sampler(D: int) -> DataSampler:
    """Uniform on the unit sphere, so E||z||^2 = 1."""
    def _sample(n, rng):
        g = rng.standard_normal((n, D))
        return g / np.linalg.norm(g, axis=1, keepdims=True)
    return _sample


def scaled_gaussian_sampler(D: int, C: float) -> DataSampler:
    """N(0, (C/D) I), so E||z||^2 = C."""
    scale = np.sqrt(C / D)
    return lambda n, rng: scale * rng.standard_normal((n, D))


def _mean_and_se(values: np.ndarray):
    n = len(values)
    se = values.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
    return float(values.mean()), float(se)


def transport_gaussian(D: int, data_sampler: DataSampler, n_trials: int, rng: np.random.Generator,
                       C: Optional[float] = None, chunk: int = 4096) -> TransportResult:
    """Monte-Carlo E||z - z0||^2 with z0 ~ N(0, I_D) drawn independently of z."""
    sq = np.empty(n_trials)
    second_moment = np.empty(n_trials)
    for start in range(0, n_trials, chunk):
        m = min(chunk, n_trials - start)
        z = data_sampler(m, rng)
        z0 = rng.standard_normal((m, D))
        sq[start:start + m] = ((z - z0) ** 2).sum(axis=1)
        second_moment[start:start + m] = (z ** 2).sum(axis=1)
    estimate, se = _mean_and_se(sq)
    C = float(second_moment.mean()) if C is None else float(C)
    bound = D + C
    holds = abs(estimate - bound) <= 3.0 * se + 1e-9
    logger.info(f"Gaussian transport D={D} C={C:.3f}: {estimate:.3f} +/- {se:.3f} (expected {bound:.3f})")
    return TransportResult(branch="gaussian", D=D, C=C, estimate=estimate, std_err=se, bound=bound, holds=holds)


def orthogonal_residuals(V: np.ndarray, epsilon: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform on the radius-epsilon sphere of the orthogonal complement of col(V)."""
    g = rng.standard_normal((n, V.shape[0]))
    g -= (g @ V) @ V.T
    if epsilon == 0:
        return np.zeros_like(g)
    return epsilon * g / np.linalg.norm(g, axis=1, keepdims=True)


def transport_anchored(V: np.ndarray, h: float, epsilon: float, n_trials: int, rng: np.random.Generator,
                       chunk: int = 2048) -> TransportResult:
    """Monte-Carlo E||z - V u||^2 for z = V u* + residual and u = u* + N(0, (h^2/r) I_r)."""
    D, r = V.shape
    sigma_max = float(svdvals(V)[0])
    sq = np.empty(n_trials)
    for start in range(0, n_trials, chunk):
        m = min(chunk, n_trials - start)
        u_star = rng.standard_normal((m, r))
        z = u_star @ V.T + orthogonal_residuals(V, epsilon, m, rng)
        u = u_star + (h / np.sqrt(r)) * rng.standard_normal((m, r))
        sq[start:start + m] = ((z - u @ V.T) ** 2).sum(axis=1)
    estimate, se = _mean_and_se(sq)
    bound = sigma_max ** 2 * h ** 2 + epsilon ** 2
    holds = estimate <= bound + 3.0 * se + 1e-12
    logger.info(f"Anchored transport D={D} r={r} h={h} eps={epsilon}: {estimate:.6f} +/- {se:.6f} (bound {bound:.6f})")
    return TransportResult(branch="anchored", D=D, r=r, epsilon=epsilon, h=h, estimate=estimate,
                           std_err=se, bound=bound, holds=holds)


def dimension_independence(results: Sequence[TransportResult], tolerance: float = 0.10) -> bool:
    """Pairwise relative spread of estimates stays below ``tolerance``."""
    values = [r.estimate for r in results]
    for i in range(len(values)):
        for j in range(i + 1, len(values)):
            scale = max(abs(values[i]), abs(values[j]), 1e-300)
            if abs(values[i] - values[j]) / scale >= tolerance:
                return False
    return True


# ---------------------------------------------------------------------------
# Posterior bounds
# ---------------------------------------------------------------------------

@dataclass
class BoundInstance:
    codes: np.ndarray
    R: float
    p: np.ndarray
    q: np.ndarray
    t: float = 0.0
    z_t: Optional[np.ndarray] = None


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q); +inf when q vanishes where p is positive."""
    return float(rel_entr(np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)).sum())


def pinsker_bound(R: float, kl: float) -> float:
    """2 R^2 KL. With R = 0 every code is the origin, so the bound is 0 even when KL is infinite."""
    if R == 0.0:
        return 0.0
    return 2.0 * R ** 2 * kl


def pinsker_check(instance: BoundInstance) -> BoundCheck:
    diff = (instance.q - instance.p) @ instance.codes
    lhs = float(diff @ diff)
    rhs = pinsker_bound(instance.R, kl_divergence(instance.p, instance.q))
    return BoundCheck(lhs=lhs, rhs=rhs, holds=bool(lhs <= rhs + 1e-12))


def velocity_bound_check(instances: Sequence[BoundInstance]) -> BoundCheck:
    """Weighted velocity MSE against 2 R^2 times the weighted CE gap.

    The (1-t)^-2 weight applies to both sides; the CE gap of q against the true
    posterior p is KL(p || q). Holds only if every instance and the averages satisfy it.
    """
    lhs_terms = []
    rhs_terms = []
    all_hold = True
    for inst in instances:
        z = inst.z_t if inst.z_t is not None else np.zeros(inst.codes.shape[1])
        weight = 1.0 / (1.0 - inst.t) ** 2
        v_p = (inst.p @ inst.codes - z)
        v_q = (inst.q @ inst.codes - z)
        lhs = weight * float((v_q - v_p) @ (v_q - v_p))
        rhs = weight * pinsker_bound(inst.R, kl_divergence(inst.p, inst.q))
        all_hold = all_hold and lhs <= rhs + 1e-12 * weight
        lhs_terms.append(lhs)
        rhs_terms.append(rhs)
    lhs_mean = float(np.mean(lhs_terms)) if lhs_terms else 0.0
    rhs_mean = float(np.mean(rhs_terms)) if rhs_terms else 0.0
    return BoundCheck(lhs=lhs_mean, rhs=rhs_mean, holds=bool(all_hold and lhs_mean <= rhs_mean + 1e-12))


def random_bound_instances(n: int, rng: np.random.Generator, max_codes: int = 16, max_radius: float = 2.0,
                           code_dim: int = 4, delta: float = 0.05) -> List[BoundInstance]:
    instances = []
    for _ in range(n):
        K = int(rng.integers(2, max_codes + 1))
        R = float(rng.uniform(0.0, max_radius)) or max_radius
        directions = rng.standard_normal((K, code_dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        codes = directions * (R * rng.uniform(0.0, 1.0, size=(K, 1)))
        p = rng.dirichlet(np.ones(K))
        q = rng.dirichlet(np.ones(K))
        t = float(rng.uniform(0.0, 1.0 - delta))
        instances.append(BoundInstance(codes=codes, R=R, p=p, q=q, t=t, z_t=rng.standard_normal(code_dim)))
    return instances


# ---------------------------------------------------------------------------
# Spectra
# ---------------------------------------------------------------------------

def effective_rank(singular_values: np.ndarray, threshold: float) -> int:
    s = np.asarray(singular_values, dtype=np.float64)
    energy = s ** 2
    total = energy.sum()
    if total <= 0:
        return 0
    cumulative = np.cumsum(energy) / total
    return int(np.searchsorted(cumulative, threshold - 1e-12) + 1)


def singular_spectrum(batch: np.ndarray, threshold: float = 0.9, label: Optional[str] = None,
                      t: Optional[float] = None) -> SpectrumReport:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] < 2:
        raise DimensionError(f"spectrum needs an (n >= 2, D) batch, got {batch.shape}")
    if not 0.0 < threshold <= 1.0:
        raise ConfigurationError(f"threshold must lie in (0, 1], got {threshold}")
    s = svdvals(batch - batch.mean(axis=0))
    energy = s ** 2
    total = energy.sum()
    cumulative = np.cumsum(energy) / total if total > 0 else np.zeros_like(energy)
    return SpectrumReport(singular_values=s.tolist(), cumulative_variance=cumulative.tolist(),
                          effective_rank=effective_rank(s, threshold), threshold=threshold, label=label, t=t)


def spectrum_along_flow(pipeline, n_samples: int, times: Sequence[float] = (0.0, 1 / 3, 2 / 3, 1.0),
                        threshold: float = 0.9, seed: int = 0) -> List[SpectrumReport]:
    """Spectra of z_t batches under anchored and Gaussian initialization through the same network."""
    steps = pipeline.flow_config.ode_steps
    tau = pipeline.flow_config.tau_infer
    codebook = pipeline.tokenizer.codebook
    snapshot_steps = {t: int(round(t * steps)) for t in times}
    reports = []
    for label, family in (("anchored", pipeline.family), ("gaussian", "gaussian")):
        rngs = spawn_rngs(seed, n_samples)
        z0 = np.stack([draw_initial(pipeline.scaffold, pipeline.prior, family, rng) for rng in rngs])
        z, _, snaps = integrate(z0, network_posterior(pipeline.network, tau), codebook.codes, steps,
                                pipeline.flow_config.delta(steps), snapshots=set(snapshot_steps.values()))
        for t, k in snapshot_steps.items():
            if t >= 1.0:
                batch = codebook.codes[quantize(z, codebook)]
            else:
                batch = snaps[k]
            reports.append(singular_spectrum(batch.reshape(n_samples, -1), threshold, label=label, t=float(t)))
    return reports


def compression_ratio(gaussian_report: SpectrumReport, anchored_report: SpectrumReport) -> float:
    return gaussian_report.effective_rank / max(anchored_report.effective_rank, 1)


# ---------------------------------------------------------------------------
# KDE convergence rate
# ---------------------------------------------------------------------------

def mixture_density_1d(x: np.ndarray) -> np.ndarray:
    return 0.5 * sum(norm.pdf(x, loc=m, scale=MIXTURE_STD) for m in MIXTURE_MEANS)


def sample_mixture(n: int, r: int, rng: np.random.Generator) -> np.ndarray:
    """Product of independent 1-D two-component mixtures, one per axis."""
    means = np.asarray(MIXTURE_MEANS)[rng.integers(0, len(MIXTURE_MEANS), size=(n, r))]
    return means + MIXTURE_STD * rng.standard_normal((n, r))


def _kernel_matrix(grid: np.ndarray, points: np.ndarray, h: float) -> np.ndarray:
    return norm.pdf((grid[:, None] - points[None, :]) / h) / h


def _kde_on_grid(points: np.ndarray, grid: np.ndarray, h: float, chunk: int = 2000) -> np.ndarray:
    n, r = points.shape
    shape = (len(grid),) * r
    est = np.zeros(shape)
    for start in range(0, n, chunk):
        block = points[start:start + chunk]
        if r == 1:
            est += _kernel_matrix(grid, block[:, 0], h).sum(axis=1)
        else:
            est += _kernel_matrix(grid, block[:, 0], h) @ _kernel_matrix(grid, block[:, 1], h).T
    return est / n


def kde_mise(points: np.ndarray, h: float, grid: np.ndarray) -> float:
    r = points.shape[1]
    est = _kde_on_grid(points, grid, h)
    truth_1d = mixture_density_1d(grid)
    truth = truth_1d if r == 1 else np.outer(truth_1d, truth_1d)
    err = (est - truth) ** 2
    for _ in range(r):
        err = trapezoid(err, grid, axis=0)
    return float(err)


def kde_rate_experiment(r: int, n_grid: Sequence[int] = DEFAULT_N_GRID, replicates: int = 10, seed: int = 0,
                        grid_points: Optional[int] = None, bandwidth_scale: float = 0.8) -> KdeRateResult:
    """Fit the log-log slope of KDE MISE against N with h = c * N^(-1/(r+4))."""
    if r not in (1, 2):
        raise ConfigurationError(f"grid quadrature supports r in (1, 2), got {r}")
    n_grid = sorted({int(n) for n in n_grid})
    if len(n_grid) < 2:
        raise ConfigurationError("the slope needs at least two distinct sample sizes")
    grid_points = grid_points or (2048 if r == 1 else 512)
    lo = min(MIXTURE_MEANS) - 6 * MIXTURE_STD
    hi = max(MIXTURE_MEANS) + 6 * MIXTURE_STD
    grid = np.linspace(lo, hi, grid_points)
    log_n = np.log(n_grid)

    mise = np.zeros((replicates, len(n_grid)))
    for rep, rng in enumerate(spawn_rngs(seed, replicates)):
        for j, n in enumerate(n_grid):
            h = bandwidth_scale * n ** (-1.0 / (r + 4))
            mise[rep, j] = kde_mise(sample_mixture(n, r, rng), h, grid)
        logger.debug(f"KDE rate r={r} replicate {rep}: {mise[rep].round(6).tolist()}")
    mean_mise = mise.mean(axis=0)
    slope = float(np.polyfit(log_n, np.log(mean_mise), 1)[0])
    replicate_slopes = [float(np.polyfit(log_n, np.log(row), 1)[0]) for row in mise]
    target = -4.0 / (r + 4)
    outside = [s for s in replicate_slopes if abs(s - target) > SLOPE_TOLERANCE]
    if outside:
        logger.warning(f"KDE rate r={r}: {len(outside)} of {replicates} replicate slopes outside the band")
    holds = abs(slope - target) <= SLOPE_TOLERANCE and not outside
    logger.info(f"KDE rate r={r}: slope {slope:.3f} (target {target:.3f}) over {replicates} replicates")
    return KdeRateResult(r=r, n_grid=list(n_grid), mise=mean_mise.tolist(), slope=slope,
                         replicate_slopes=replicate_slopes, target=target, holds=holds)
