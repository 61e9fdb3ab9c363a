import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import svd
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from models.errors import ConfigurationError, DimensionError
from models.schemas import Normalization, ScaffoldBasis, ScaffoldConfig
from services.autodiff import Tensor, absolute, normalize, sqrt
from services.layers import Parameter

# Set up logger
logger = logging.getLogger(__name__)

INIT_STD = 0.01
ZERO_ROW_NOISE = 1e-8


class AnchorScaffold:
    """Low-rank factors of the flattened latents: Z ~ U V^T with U (M x r), V (D x r)."""

    def __init__(self, U: np.ndarray, V: np.ndarray, latent_len: int, code_dim: int, config: ScaffoldConfig):
        U = np.asarray(U)
        V = np.asarray(V)
        if U.ndim != 2 or V.ndim != 2 or U.shape[1] != V.shape[1]:
            raise DimensionError(f"U {U.shape} and V {V.shape} must share the rank axis")
        if V.shape[0] != latent_len * code_dim:
            raise DimensionError(f"V has {V.shape[0]} rows, expected D = {latent_len} * {code_dim}")
        self.U = Parameter(U)
        self.V = Parameter(V)
        self.latent_len = latent_len
        self.code_dim = code_dim
        self.config = config
        self.U.requires_grad = self.trainable
        self.V.requires_grad = self.trainable

    @property
    def M(self) -> int:
        return self.U.shape[0]

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @property
    def D(self) -> int:
        return self.V.shape[0]

    @property
    def trainable(self) -> bool:
        return self.config.basis == ScaffoldBasis.LEARNED

    def parameters(self):
        return [self.U, self.V] if self.trainable else []

    def initial_latents(self, rows: np.ndarray) -> Tensor:
        """Differentiable anchored z0 for the owned coordinate rows."""
        return anchor_init_tensor(self.U[np.asarray(rows)], self.V, self.latent_len, self.code_dim,
                                  self.config.normalization)

    def coordinates(self) -> np.ndarray:
        return self.U.data.astype(np.float64)


def _check_rank(M: int, r: int, D: int):
    if r < 1 or r > min(M, D):
        logger.error(f"Rank {r} outside [1, min(M={M}, D={D})]")
        raise ConfigurationError(f"rank {r} must lie in [1, min(M={M}, D={D})]")


def init_scaffold(M: int, r: int, latent_len: int, code_dim: int, seed, config: Optional[ScaffoldConfig] = None) -> AnchorScaffold:
    """U and V filled with N(0, 0.01^2) entries."""
    D = latent_len * code_dim
    _check_rank(M, r, D)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    U = rng.normal(0.0, INIT_STD, size=(M, r))
    V = rng.normal(0.0, INIT_STD, size=(D, r))
    return AnchorScaffold(U, V, latent_len, code_dim, config or ScaffoldConfig(rank=r))


def svd_scaffold(latents: np.ndarray, r: int, config: Optional[ScaffoldConfig] = None) -> AnchorScaffold:
    """Frozen basis: top-r right singular vectors of the centred latent matrix."""
    latents = np.asarray(latents, dtype=np.float64)
    M, latent_len, code_dim = latents.shape
    Z = latents.reshape(M, -1)
    _check_rank(M, r, Z.shape[1])
    _, _, vt = svd(Z - Z.mean(axis=0), full_matrices=False)
    V = vt[:r].T
    U = Z @ V
    U = U / max(U.std(), 1e-12)
    config = (config or ScaffoldConfig(rank=r)).model_copy(update={"basis": ScaffoldBasis.SVD})
    logger.info(f"Built SVD scaffold with rank {r} over {M} latents")
    return AnchorScaffold(U, V, latent_len, code_dim, config)


def anchor_init(u: np.ndarray, V: np.ndarray, latent_len: int, code_dim: int,
                normalization: Normalization = Normalization.ROW,
                rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Map coordinates u (r,) or (B, r) to z0 = normalize(u V^T) of shape (.., L, d_c).

    Row mode gives every position unit norm (||z0||_F = sqrt(L)); global mode
    scales the whole flattened vector to unit norm.
    """
    u = np.asarray(u, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    single = u.ndim == 1
    ub = u[None] if single else u
    if ub.shape[1] != V.shape[1] or V.shape[0] != latent_len * code_dim:
        raise DimensionError(f"u {u.shape} and V {V.shape} do not match L={latent_len}, d_c={code_dim}")
    z = (ub @ V.T).reshape(len(ub), latent_len, code_dim)
    if Normalization(normalization) == Normalization.GLOBAL:
        norms = np.linalg.norm(z.reshape(len(ub), -1), axis=1)[:, None, None]
        zero = norms[:, 0, 0] == 0
        if zero.any():
            noise_rng = rng or np.random.default_rng(0)
            z[zero] += ZERO_ROW_NOISE * noise_rng.standard_normal(z[zero].shape)
            norms = np.linalg.norm(z.reshape(len(ub), -1), axis=1)[:, None, None]
        z = z / norms
    else:
        norms = np.linalg.norm(z, axis=-1, keepdims=True)
        zero = norms[..., 0] == 0
        if zero.any():
            logger.debug(f"anchor_init perturbing {int(zero.sum())} zero rows")
            noise_rng = rng or np.random.default_rng(0)
            z[zero] = ZERO_ROW_NOISE * noise_rng.standard_normal((int(zero.sum()), code_dim))
            norms = np.linalg.norm(z, axis=-1, keepdims=True)
        z = z / norms
    return z[0] if single else z


def anchor_init_tensor(U_rows: Tensor, V: Tensor, latent_len: int, code_dim: int,
                       normalization: Normalization = Normalization.ROW) -> Tensor:
    batch = U_rows.shape[0]
    z = U_rows @ V.transpose(1, 0)
    if Normalization(normalization) == Normalization.GLOBAL:
        return normalize(z, axis=-1).reshape(batch, latent_len, code_dim)
    return normalize(z.reshape(batch, latent_len, code_dim), axis=-1)


def coord_reg_terms(U: Tensor) -> Tuple[Tensor, Tensor]:
    """(||u_bar||^2, |std(U) - 1|) with std the population std over all entries."""
    u_bar = U.mean(axis=0)
    mean_term = (u_bar * u_bar).sum()
    centred = U - U.mean()
    std = sqrt((centred * centred).mean())
    return mean_term, absolute(std - 1.0)


def coord_reg_loss(U, lambda_mu: float, lambda_sigma: float) -> float:
    U = np.asarray(U.data if isinstance(U, Tensor) else U, dtype=np.float64)
    if U.shape[0] < 2:
        raise ConfigurationError("coordinate regularization needs M >= 2")
    u_bar = U.mean(axis=0)
    return float(lambda_mu * u_bar @ u_bar + lambda_sigma * abs(U.std() - 1.0))


def nearest_neighbors(U: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Distance to and index of each row's nearest other row (exact O(M^2) scan)."""
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] < 2:
        logger.error(f"Nearest neighbours need at least two coordinate rows, got {np.shape(U)}")
        raise ConfigurationError("mean nearest-neighbour distance needs M >= 2")
    dist = cdist(U, U)
    np.fill_diagonal(dist, np.inf)
    idx = dist.argmin(axis=1)
    return dist[np.arange(len(U)), idx], idx


def mean_nn_distance(U: np.ndarray) -> float:
    return float(nearest_neighbors(U)[0].mean())


class AnchorPrior:
    """Equal-weight Gaussian mixture over the anchor coordinates.

    The bandwidth is alpha times the mean nearest-neighbour distance unless a
    fixed value is given.
    """

    def __init__(self, coords: np.ndarray, alpha: float, bandwidth: Optional[float] = None):
        self.alpha = float(alpha)
        self.fixed_bandwidth = bandwidth
        self.refresh(coords)

    def refresh(self, coords: np.ndarray):
        self.coords = np.array(coords, dtype=np.float64)
        if len(self.coords) >= 2:
            nn_dist, self.nn_index = nearest_neighbors(self.coords)
            self.mean_nn_distance = float(nn_dist.mean())
        else:
            self.nn_index = np.zeros(len(self.coords), dtype=np.int64)
            self.mean_nn_distance = 0.0
        if self.fixed_bandwidth is not None:
            self.bandwidth = float(self.fixed_bandwidth)
        else:
            self.bandwidth = self.alpha * self.mean_nn_distance
        logger.debug(f"Anchor prior over {len(self.coords)} coordinates: d_nn={self.mean_nn_distance:.4f} h={self.bandwidth:.4f}")

    @property
    def M(self) -> int:
        return self.coords.shape[0]

    @property
    def rank(self) -> int:
        return self.coords.shape[1]

    def coordinate_stats(self) -> dict:
        return {
            "mean_norm": float(np.linalg.norm(self.coords.mean(axis=0))),
            "global_std": float(self.coords.std()),
        }


def build_prior(scaffold: AnchorScaffold, rows: Optional[Sequence[int]] = None) -> AnchorPrior:
    coords = scaffold.coordinates()
    if rows is not None:
        coords = coords[np.asarray(rows)]
    return AnchorPrior(coords, scaffold.config.alpha, scaffold.config.bandwidth)


def sample_anchor(prior: AnchorPrior, rng: np.random.Generator) -> np.ndarray:
    j = rng.integers(prior.M)
    return prior.coords[j] + prior.bandwidth * rng.standard_normal(prior.rank)


def sample_interpolation(prior: AnchorPrior, rng: np.random.Generator) -> np.ndarray:
    """Uniform blend between a random anchor and its nearest neighbour."""
    i = rng.integers(prior.M)
    j = prior.nn_index[i]
    w = rng.uniform()
    return (1.0 - w) * prior.coords[i] + w * prior.coords[j]


def kde_density(u: np.ndarray, prior: AnchorPrior) -> np.ndarray:
    """Exact mixture density at one query (r,) or many (n, r)."""
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    q = u[None] if single else u
    h = prior.bandwidth
    r = prior.rank
    sq = cdist(q, prior.coords, "sqeuclidean")
    log_dens = logsumexp(-sq / (2.0 * h * h), axis=1) - np.log(prior.M) - 0.5 * r * np.log(2.0 * np.pi * h * h)
    dens = np.exp(log_dens)
    return float(dens[0]) if single else dens
