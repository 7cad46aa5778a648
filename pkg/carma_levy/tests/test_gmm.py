import numpy as np
import pytest
import scipy.special
import scipy.stats

from carma_levy import carma, gmm
from carma_levy.exceptions import (
    DegenerateSampleError,
    GmmConvergenceError,
    RankDeficiencyError,
    SingularMatrixError,
)
from carma_levy.levy import IncrementSample, gamma_char_exponent, sample_increments
from carma_levy.models.carma import CarmaModel
from carma_levy.models.levy import DriftOnly
from carma_levy.tests.helpers import numeric_gradient


FISHER_AT_TRUTH = np.array([[0.25, 0.5], [0.5, 1.6449340668]])


@pytest.fixture()
def gamma_sample(rng, gamma_driver) -> IncrementSample:
    return IncrementSample(sample_increments(gamma_driver, 1.0, 100_000, rng))


@pytest.fixture()
def small_gamma_sample(rng, gamma_driver) -> IncrementSample:
    return IncrementSample(sample_increments(gamma_driver, 1.0, 2_000, rng))


def random_spd(rng, q: int) -> np.ndarray:
    root = rng.normal(size=(q, q))
    return root @ root.T + q * np.eye(q)


def test_gamma_mle_recovers_parameters(gamma_sample):
    """Test the score estimate against the truth and the closed form MLE."""

    mf = gmm.gamma_mle_moment_function()
    result = gmm.gmm_estimate(gamma_sample, mf, np.eye(2))

    b, a = result.theta_hat
    assert abs(b - 2.0) < 0.05
    assert abs(a - 1.0) < 0.03
    assert result.converged
    assert result.criterion_value >= 0

    shape, _, scale = scipy.stats.gamma.fit(gamma_sample.values[:, 0], floc=0)
    assert np.allclose(result.theta_hat, [scale, shape], atol=1e-4)


def test_gamma_mle_matches_grid_search(gamma_sample):
    """Test the estimate lies next to the maximizer of the log-likelihood
    over a 0.01 grid on [1, 3] x [0.5, 1.5]."""

    x = gamma_sample.values[:, 0]
    mean_x, mean_log = x.mean(), np.log(x).mean()
    b, a = np.meshgrid(np.arange(1.0, 3.005, 0.01), np.arange(0.5, 1.505, 0.01))
    loglik = -scipy.special.gammaln(a) - a * np.log(b) + (a - 1) * mean_log - mean_x / b
    row, col = np.unravel_index(np.argmax(loglik), loglik.shape)

    result = gmm.gmm_estimate(gamma_sample, gmm.gamma_mle_moment_function(), np.eye(2))

    # In the information metric the lattice is spanned by orthogonal steps
    # (1, 0) and (2, -1), so the closest cell can be 1.5 steps away in b
    assert abs(result.theta_hat[0] - b[row, col]) <= 0.02 + 1e-9
    assert abs(result.theta_hat[1] - a[row, col]) <= 0.01 + 1e-9


def test_gamma_score_vanishes_at_mean():
    mf = gmm.gamma_mle_moment_function()

    assert mf.g(np.array([[2.0]]), np.array([2.0, 1.0]))[0, 0] == 0


def test_cf_matching_recovers_parameters(gamma_sample):
    mf = gmm.gamma_cf_moment_function((0.5, 1.0))
    result = gmm.gmm_estimate(gamma_sample, mf, np.eye(4))

    assert mf.q_dim == 4
    assert np.all(np.abs(result.theta_hat - [2.0, 1.0]) < 0.1)


def test_two_stage_exactly_identified(small_gamma_sample):
    """Test the weighting does not move the estimate when q = r."""

    mf = gmm.gamma_mle_moment_function()
    first = gmm.gmm_estimate(small_gamma_sample, mf, np.eye(2))
    second = gmm.two_stage_estimate(small_gamma_sample, mf)

    assert np.allclose(first.theta_hat, second.theta_hat, atol=1e-6)
    assert not np.allclose(second.weighting_used, np.eye(2))
    assert second.iterations > first.iterations


def test_two_stage_reduces_covariance(rng, gamma_driver):
    """Test the second stage Sigma_hat is below the first in PSD order."""

    mf = gmm.gamma_cf_moment_function()
    for _ in range(5):
        sample = IncrementSample(sample_increments(gamma_driver, 1.0, 2_000, rng))
        second = gmm.two_stage_estimate(sample, mf)
        identity = gmm.asymptotic_covariance(
            second.G_hat, second.Omega_hat, np.eye(4)
        )

        gap = np.linalg.eigvalsh(identity - second.Sigma_hat)
        assert gap.min() >= -1e-3 * np.abs(identity).max()


def test_weighting_scale_invariance(small_gamma_sample):
    mf = gmm.gamma_cf_moment_function()
    W = gmm.optimal_weighting(np.diag([1.0, 2.0, 3.0, 4.0]), 2)[0]

    base = gmm.gmm_estimate(small_gamma_sample, mf, W)
    scaled = gmm.gmm_estimate(small_gamma_sample, mf, 17 * W)

    assert np.allclose(base.theta_hat, scaled.theta_hat, atol=1e-6)
    assert np.isclose(scaled.criterion_value, 17 * base.criterion_value, rtol=1e-4)


def test_estimate_is_permutation_invariant(rng, small_gamma_sample):
    mf = gmm.gamma_mle_moment_function()
    shuffled = IncrementSample(rng.permutation(small_gamma_sample.values))

    base = gmm.two_stage_estimate(small_gamma_sample, mf)
    permuted = gmm.two_stage_estimate(shuffled, mf)

    assert np.allclose(base.theta_hat, permuted.theta_hat, rtol=0, atol=1e-12)


def test_gmm_estimate_checks_weighting_shape(small_gamma_sample):
    with pytest.raises(ValueError, match="W must be 2x2"):
        gmm.gmm_estimate(small_gamma_sample, gmm.gamma_mle_moment_function(), np.eye(3))


def test_gmm_estimate_convergence_failure(small_gamma_sample):
    opt = gmm.OptimizerConfig(max_iter=2, restarts=1)

    with pytest.raises(GmmConvergenceError) as exc_info:
        gmm.gmm_estimate(small_gamma_sample, gmm.gamma_mle_moment_function(), np.eye(2), opt)

    diagnostics = exc_info.value.diagnostics
    assert diagnostics["restarts"] == 1
    assert set(diagnostics) == {"theta", "criterion", "iterations", "restarts"}


def test_non_positive_points_are_dropped_and_flagged(rng, gamma_driver):
    values = np.concatenate(
        [sample_increments(gamma_driver, 1.0, 1_000, rng), -np.ones((50, 1))]
    )

    result = gmm.two_stage_estimate(IncrementSample(values), gmm.gamma_mle_moment_function())

    assert result.dropped == 50
    assert result.n_used == 1_000
    assert result.flagged
    assert result.to_out(N=1_050, h=0.01).flagged


def test_few_dropped_points_are_not_flagged(rng, gamma_driver):
    values = np.concatenate(
        [sample_increments(gamma_driver, 1.0, 1_000, rng), np.zeros((5, 1))]
    )

    result = gmm.gmm_estimate(IncrementSample(values), gmm.gamma_mle_moment_function(), np.eye(2))

    assert result.dropped == 5
    assert not result.flagged


def test_degenerate_sample():
    with pytest.raises(DegenerateSampleError):
        gmm.gmm_estimate(
            IncrementSample(np.zeros(10)), gmm.gamma_mle_moment_function(), np.eye(2)
        )


def test_asymptotic_covariance_optimal_weighting(rng):
    for _ in range(5):
        G = rng.normal(size=(4, 2))
        omega = random_spd(rng, 4)
        expected = np.linalg.inv(G.T @ np.linalg.inv(omega) @ G)

        result = gmm.asymptotic_covariance(G, omega, np.linalg.inv(omega))

        assert np.allclose(result, expected, atol=1e-10)


def test_asymptotic_covariance_gamma_mle():
    """Test Sigma = I^-1 for the score with G = -I and Omega = I."""

    fisher = gmm.gamma_fisher_information(2.0, 1.0)
    sigma = gmm.asymptotic_covariance(-fisher, fisher, np.eye(2))

    assert np.allclose(fisher, FISHER_AT_TRUTH, atol=1e-10)
    assert np.allclose(np.linalg.inv(sigma), FISHER_AT_TRUTH, atol=1e-9)
    assert np.allclose(sigma, [[10.2022, -3.1011], [-3.1011, 1.5506]], atol=1e-4)
    assert np.allclose(
        sigma / 200, [[5.10e-2, -1.55e-2], [-1.55e-2, 0.78e-2]], atol=1e-4
    )


def test_asymptotic_covariance_rank_deficient():
    G = np.array([[1.0, 2.0], [2.0, 4.0], [0.0, 0.0]])

    with pytest.raises(RankDeficiencyError):
        gmm.asymptotic_covariance(G, np.eye(3), np.eye(3))


def test_optimal_weighting_gap(rng):
    """Test Sigma_W - Sigma_opt is positive semi-definite."""

    for _ in range(100):
        q = int(rng.integers(3, 6))
        G = rng.normal(size=(q, 2))
        omega = random_spd(rng, q)
        root = rng.normal(size=(q, q))
        W = root @ root.T + 0.1 * np.eye(q)

        gap = gmm.asymptotic_covariance(G, omega, W) - gmm.asymptotic_covariance(
            G, omega, np.linalg.inv(omega)
        )

        assert np.linalg.eigvalsh(gap).min() >= -1e-9


def test_exactly_identified_covariance_ignores_weighting(rng):
    G = rng.normal(size=(2, 2)) + 2 * np.eye(2)
    omega = random_spd(rng, 2)

    results = [
        gmm.asymptotic_covariance(G, omega, random_spd(rng, 2)) for _ in range(3)
    ]

    assert np.allclose(results[0], results[1], atol=1e-9)
    assert np.allclose(results[0], results[2], atol=1e-9)


def test_optimal_weighting():
    W, warnings = gmm.optimal_weighting(np.diag([2.0, 4.0]), 2)

    assert np.allclose(W, np.diag([0.5, 0.25]))
    assert warnings == []


def test_optimal_weighting_floors_one_eigenvalue():
    W, warnings = gmm.optimal_weighting(np.diag([1.0, 1.0, 0.0]), 2)

    assert np.all(np.isfinite(W))
    assert len(warnings) == 1


def test_optimal_weighting_singular():
    with pytest.raises(SingularMatrixError, match="more data"):
        gmm.optimal_weighting(np.diag([1.0, 0.0]), 2)


def test_gamma_mle_gradient_expectation(rng, gamma_driver):
    """Test E[-grad g] at the truth is the Fisher information."""

    mf = gmm.gamma_mle_moment_function()
    x = sample_increments(gamma_driver, 1.0, 100_000, rng)

    assert np.allclose(-mf.grad(x, np.array([2.0, 1.0])).mean(axis=0), FISHER_AT_TRUTH, atol=0.01)


def test_gamma_mle_information_identity(rng, gamma_driver):
    """Test E[g g'] = E[-grad g] at the truth."""

    mf = gmm.gamma_mle_moment_function()
    x = sample_increments(gamma_driver, 1.0, 1_000_000, rng)
    scores = mf.g(x, np.array([2.0, 1.0]))
    products = scores[:, :, None] * scores[:, None, :]

    mean = products.mean(axis=0)
    standard_error = products.std(axis=0) / np.sqrt(x.shape[0])

    assert np.all(np.abs(mean - FISHER_AT_TRUTH) <= 4 * standard_error)


def test_gamma_mle_gradient_matches_finite_differences():
    mf = gmm.gamma_mle_moment_function()
    x = np.array([[0.4], [3.0]])

    numeric = numeric_gradient(lambda t: mf.g(x, t), np.array([2.0, 1.0]))

    assert np.allclose(mf.grad(x, np.array([2.0, 1.0])), numeric, atol=1e-6)


def test_cf_model_value(rng, gamma_driver):
    """Test exp(psi(1)) = 1 / (1 - 2i) against the empirical mean."""

    assert np.isclose(np.exp(gamma_char_exponent(1.0, 2.0, 1.0)), 0.2 + 0.4j)

    mf = gmm.gamma_cf_moment_function((1.0,))
    x = sample_increments(gamma_driver, 1.0, 1_000_000, rng)
    moments = mf.g(x, np.array([2.0, 1.0]))
    standard_error = moments.std(axis=0) / np.sqrt(x.shape[0])

    assert np.all(np.abs(moments.mean(axis=0)) <= 4 * standard_error)


def test_cf_gradient_matches_finite_differences():
    mf = gmm.gamma_cf_moment_function()
    x = np.array([[0.5], [1.5], [4.0]])
    theta = np.array([2.0, 1.0])

    numeric = numeric_gradient(lambda t: mf.g(x, t), theta)

    assert mf.grad(x, theta).shape == (3, 4, 2)
    assert np.allclose(mf.grad(x, theta), numeric, atol=1e-6)


def test_cf_moment_covariance(rng, gamma_driver):
    """Test the closed form covariance against the sample covariance."""

    points = (0.5, 1.0)
    mf = gmm.gamma_cf_moment_function(points)
    x = sample_increments(gamma_driver, 1.0, 200_000, rng)
    empirical = np.cov(mf.g(x, np.array([2.0, 1.0])), rowvar=False)

    omega = gmm.cf_moment_covariance(
        points, lambda u: np.exp(gamma_char_exponent(u, 2.0, 1.0))
    )

    assert omega.shape == (4, 4)
    assert np.allclose(omega, empirical, atol=0.01)


@pytest.mark.parametrize(
    "points, message",
    [((), "At least one"), ((0.0, 1.0), "u = 0"), ((1.0, 1.0), "distinct")],
)
def test_cf_rejects_bad_points(points, message):
    with pytest.raises(ValueError, match=message):
        gmm.gamma_cf_moment_function(points)


def test_moment_function_order_condition():
    with pytest.raises(ValueError, match="cannot identify"):
        gmm.MomentFunction(
            q_dim=1,
            r_dim=2,
            g=lambda x, t: x,
            grad=lambda x, t: x,
            start=lambda x: np.ones(2),
        )


def test_result_to_out(small_gamma_sample):
    result = gmm.estimate_from_increments(
        small_gamma_sample, gmm.gamma_mle_moment_function(), h=0.1
    )
    out = result.to_out()

    assert (out.N, out.h) == (2_000, 0.1)
    assert len(out.theta) == 2
    assert np.allclose(out.sigma, np.asarray(out.sigma).T)
    assert out.converged


def test_estimate_from_observations_zero_driver(gamma_model, gamma_ssr, rng):
    path = carma.simulate(gamma_model, gamma_ssr, DriftOnly(gamma=[0.0]), 5.1, 0.01, rng)
    series = carma.sample(path, 0.1, 5, extra=1)

    with pytest.raises(DegenerateSampleError):
        gmm.estimate_from_observations(
            gamma_model, gamma_ssr, series, gmm.gamma_mle_moment_function()
        )


def test_estimate_from_observations_checks_realization(gamma_model):
    other = carma.build_state_space(CarmaModel(p=2, q=1, A=[3.0, 2.0], B=[1.0, 1.0]))
    series = carma.SampledSeries(h=0.5, N=1, extra=1, values=np.ones(4))

    with pytest.raises(ValueError, match="does not belong"):
        gmm.estimate_from_observations(
            gamma_model, other, series, gmm.gamma_mle_moment_function()
        )


@pytest.mark.slow
def test_estimate_from_observations_pipeline(gamma_model, gamma_ssr, gamma_driver):
    """Test one path with T = 200 sampled at h = 0.001 lands inside three
    standard deviations of Sigma / 200."""

    rng = np.random.default_rng(99)
    path = carma.simulate(gamma_model, gamma_ssr, gamma_driver, 200.001, 1e-4, rng)
    series = carma.sample(path, 0.001, 200, extra=1)

    result = gmm.estimate_from_observations(
        gamma_model, gamma_ssr, series, gmm.gamma_mle_moment_function()
    )

    assert (result.N, result.h) == (200, 0.001)
    assert abs(result.theta_hat[0] - 2.0) < 0.6
    assert abs(result.theta_hat[1] - 1.0) < 0.25
