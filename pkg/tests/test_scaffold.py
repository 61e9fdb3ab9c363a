import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.stats import kstest, norm

from models.errors import ConfigurationError, DimensionError
from models.schemas import Normalization, ScaffoldBasis, ScaffoldConfig
from services.autodiff import Tensor, gradient_check
from services.scaffold_service import (
    AnchorPrior,
    anchor_init,
    anchor_init_tensor,
    build_prior,
    coord_reg_loss,
    coord_reg_terms,
    init_scaffold,
    kde_density,
    mean_nn_distance,
    nearest_neighbors,
    sample_anchor,
    sample_interpolation,
    svd_scaffold,
)

LINE = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])


class TestInit:
    def test_shapes_and_scale(self):
        scaffold = init_scaffold(200, 4, 3, 5, seed=0)
        assert scaffold.U.shape == (200, 4)
        assert scaffold.V.shape == (15, 4)
        assert scaffold.U.data.std() == pytest.approx(0.01, rel=0.2)
        assert scaffold.trainable and len(scaffold.parameters()) == 2

    @pytest.mark.parametrize("rank", [0, 16, 11])
    def test_rank_outside_range(self, rank):
        # min(M=10, D=15) = 10
        with pytest.raises(ConfigurationError):
            init_scaffold(10, rank, 3, 5, seed=0)

    def test_svd_basis_is_frozen_and_orthonormal(self, rng):
        latents = rng.standard_normal((40, 2, 3))
        scaffold = svd_scaffold(latents, 3)
        assert scaffold.config.basis == ScaffoldBasis.SVD
        assert scaffold.parameters() == []
        np.testing.assert_allclose(scaffold.V.data.T @ scaffold.V.data, np.eye(3), atol=1e-6)
        assert scaffold.U.data.std() == pytest.approx(1.0, rel=1e-5)


class TestAnchorInit:
    def test_row_normalization(self, rng):
        V = rng.standard_normal((12, 3))
        z = anchor_init(rng.standard_normal((5, 3)), V, 4, 3)
        assert z.shape == (5, 4, 3)
        np.testing.assert_allclose(np.linalg.norm(z, axis=-1), 1.0)
        np.testing.assert_allclose(np.linalg.norm(z.reshape(5, -1), axis=1), 2.0)

    def test_global_normalization(self, rng):
        V = rng.standard_normal((12, 3))
        z = anchor_init(rng.standard_normal(3), V, 4, 3, Normalization.GLOBAL)
        assert z.shape == (4, 3)
        assert np.linalg.norm(z) == pytest.approx(1.0)

    @pytest.mark.parametrize("mode", list(Normalization))
    def test_zero_coordinates_stay_finite(self, rng, mode):
        z = anchor_init(np.zeros(3), rng.standard_normal((12, 3)), 4, 3, mode)
        assert np.isfinite(z).all()

    @pytest.mark.parametrize("mode", list(Normalization))
    def test_positive_scaling_of_coordinates_is_ignored(self, rng, mode):
        V = rng.standard_normal((12, 3))
        u = rng.standard_normal((20, 3))
        base = anchor_init(u, V, 4, 3, mode)
        for alpha in rng.uniform(0.01, 100.0, size=5):
            np.testing.assert_allclose(anchor_init(alpha * u, V, 4, 3, mode), base, rtol=1e-10, atol=1e-12)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            anchor_init(np.ones(2), rng.standard_normal((12, 3)), 4, 3)

    @pytest.mark.parametrize("mode", list(Normalization))
    def test_tensor_version_matches(self, rng, mode):
        U = rng.standard_normal((6, 3))
        V = rng.standard_normal((12, 3))
        expected = anchor_init(U, V, 4, 3, mode)
        actual = anchor_init_tensor(Tensor(U), Tensor(V), 4, 3, mode).data
        np.testing.assert_allclose(actual, expected, rtol=1e-10)

    def test_tensor_version_gradients(self, rng):
        U = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        V = Tensor(rng.standard_normal((6, 2)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 3, 2)))
        assert gradient_check(lambda: (anchor_init_tensor(U, V, 3, 2) * w).sum(), [U, V]) < 1e-6


class TestCoordinateRegularizer:
    def test_standardized_coordinates_cost_nothing(self):
        U = np.array([[1.0, -1.0], [-1.0, 1.0]])
        assert coord_reg_loss(U, 0.1, 10.0) == pytest.approx(0.0)

    def test_penalizes_offset_and_spread(self):
        U = np.array([[2.0], [4.0]])
        # mean 3, std 1
        assert coord_reg_loss(U, 0.1, 10.0) == pytest.approx(0.9)
        assert coord_reg_loss(U * 0.5, 0.0, 10.0) == pytest.approx(5.0)

    def test_needs_two_rows(self):
        with pytest.raises(ConfigurationError):
            coord_reg_loss(np.ones((1, 3)), 0.1, 10.0)

    def test_terms_match_loss_and_differentiate(self, rng):
        U = Tensor(rng.standard_normal((8, 3)) * 3.0 + 1.0, requires_grad=True)
        mean_term, std_term = coord_reg_terms(U)
        assert 0.1 * mean_term.item() + 10.0 * std_term.item() == pytest.approx(coord_reg_loss(U, 0.1, 10.0))

        def loss():
            m, s = coord_reg_terms(U)
            return m * 0.1 + s * 10.0

        assert gradient_check(loss, [U]) < 1e-6


class TestPrior:
    def test_nearest_neighbors(self):
        dist, idx = nearest_neighbors(LINE)
        np.testing.assert_allclose(dist, [1.0, 1.0, 2.0])
        np.testing.assert_array_equal(idx, [1, 0, 1])
        assert mean_nn_distance(LINE) == pytest.approx(4.0 / 3.0)
        with pytest.raises(ConfigurationError):
            nearest_neighbors(LINE[:1])

    def test_bandwidth_rule(self):
        assert AnchorPrior(LINE, alpha=0.02).bandwidth == pytest.approx(0.02 * 4.0 / 3.0)
        assert AnchorPrior(LINE, alpha=0.02, bandwidth=0.7).bandwidth == 0.7

    def test_bandwidth_is_linear_in_alpha(self, rng):
        coords = rng.standard_normal((30, 4))
        for alpha in (0.01, 0.02, 0.3):
            assert AnchorPrior(coords, alpha=2 * alpha).bandwidth == pytest.approx(
                2 * AnchorPrior(coords, alpha=alpha).bandwidth, rel=1e-12)

    def test_refresh_matches_brute_force(self, rng):
        coords = rng.standard_normal((25, 3))
        prior = AnchorPrior(coords, alpha=0.05)
        moved = coords + 0.1 * rng.standard_normal(coords.shape)
        prior.refresh(moved)
        brute = np.mean([min(np.linalg.norm(moved[i] - moved[j]) for j in range(len(moved)) if j != i)
                         for i in range(len(moved))])
        assert prior.mean_nn_distance == pytest.approx(brute, rel=1e-12)
        assert prior.bandwidth == pytest.approx(0.05 * brute, rel=1e-12)

    def test_density_at_isolated_anchor(self):
        prior = AnchorPrior(np.array([[0.0, 0.0], [100.0, 0.0]]), alpha=0.02, bandwidth=1.0)
        assert kde_density(np.zeros(2), prior) == pytest.approx(0.5 / (2.0 * np.pi))
        np.testing.assert_allclose(kde_density(np.array([[0.0, 0.0], [100.0, 0.0]]), prior), 0.5 / (2.0 * np.pi))

    def test_anchor_samples_stay_near_anchors(self, rng):
        prior = AnchorPrior(LINE, alpha=0.02)
        samples = np.array([sample_anchor(prior, rng) for _ in range(200)])
        nearest = np.min(np.linalg.norm(samples[:, None] - LINE[None], axis=-1), axis=1)
        assert nearest.max() < 10 * prior.bandwidth

    def test_samples_follow_the_mixture(self):
        anchors = np.array([[-2.0], [0.0], [0.5], [3.0]])
        prior = AnchorPrior(anchors, alpha=0.02, bandwidth=0.4)
        rng = np.random.default_rng(7)
        samples = np.array([sample_anchor(prior, rng)[0] for _ in range(10_000)])

        def mixture_cdf(x):
            return norm.cdf((np.asarray(x)[..., None] - anchors[:, 0]) / 0.4).mean(axis=-1)

        assert kstest(samples, mixture_cdf).pvalue > 0.01

    @pytest.mark.parametrize("bandwidth", [0.05, 0.4])
    def test_density_integrates_to_one(self, bandwidth):
        prior = AnchorPrior(LINE[:, :1], alpha=0.02, bandwidth=bandwidth)
        grid = np.linspace(-10.0 * bandwidth, 3.0 + 10.0 * bandwidth, 20_001)
        mass = trapezoid(kde_density(grid[:, None], prior), grid)
        assert mass == pytest.approx(1.0, abs=1e-3)

    def test_two_dimensional_density_integrates_to_one(self):
        prior = AnchorPrior(LINE, alpha=0.02, bandwidth=0.5)
        xs = np.linspace(-5.0, 8.0, 401)
        ys = np.linspace(-5.0, 5.0, 301)
        grid = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
        dens = kde_density(grid, prior).reshape(len(xs), len(ys))
        assert trapezoid(trapezoid(dens, ys, axis=1), xs) == pytest.approx(1.0, abs=1e-3)

    def test_interpolation_stays_on_segments(self, rng):
        prior = AnchorPrior(LINE, alpha=0.02)
        samples = np.array([sample_interpolation(prior, rng) for _ in range(100)])
        np.testing.assert_array_equal(samples[:, 1], 0.0)
        assert samples[:, 0].min() >= 0.0 and samples[:, 0].max() <= 3.0

    def test_build_prior_from_rows(self):
        scaffold = init_scaffold(20, 2, 2, 2, seed=1, config=ScaffoldConfig(rank=2, alpha=0.1))
        prior = build_prior(scaffold, rows=range(10))
        assert prior.M == 10
        assert prior.bandwidth == pytest.approx(0.1 * mean_nn_distance(scaffold.coordinates()[:10]))
