import numpy as np
import pytest

from fusedsvc.graphs import RegionGraph
from fusedsvc.model import SvcDataset, SvcObservation, generate_case
from fusedsvc.posterior import (IntensifiedPrior, PosteriorControls, gibbs_sample,
                                log_predictive, log_predictive_batch, predictive_moments)
from fusedsvc.solver import PenaltyWeights


def make_draws(matrix, sigma2=1.0, p_tilde=1):
    from fusedsvc.posterior import PosteriorDraws

    return PosteriorDraws(draws=np.asarray(matrix, dtype=float), burn_in=0,
                          thinning=1, seed=0, sigma2=sigma2, p_tilde=p_tilde)


def test_conjugate_gaussian_case():
    data, _ = generate_case(1, 1, 1.0, seed=3)
    prior = IntensifiedPrior(PenaltyWeights.tied(0.0, 0.0, 3))
    draws = gibbs_sample(data, prior,
                         PosteriorControls(burn_in=200, n_keep=20_000, thinning=1, seed=5))
    X = data.design()
    ols, *_ = np.linalg.lstsq(X, data.y, rcond=None)
    cov = np.linalg.inv(X.T @ X)
    # iid draws here, so MC standard errors are exact
    se = np.sqrt(np.diag(cov) / draws.n_draws)
    assert np.all(np.abs(draws.draws.mean(axis=0) - ols) <= 3 * se)
    sample_cov = np.cov(draws.draws.T)
    scale = np.abs(cov).max()
    assert np.abs(sample_cov - cov).max() <= 0.10 * scale


def test_prior_domination_fuses_draws():
    data, _ = generate_case(1, 1, 1.0, seed=4)
    spreads = []
    for lam2 in (5.0, 500.0):
        prior = IntensifiedPrior(PenaltyWeights.tied(0.0, lam2, 3))
        draws = gibbs_sample(data, prior,
                             PosteriorControls(burn_in=300, n_keep=800, thinning=1, seed=6))
        theta = draws.draws.reshape(-1, 3, 3)
        spreads.append(np.mean(theta.max(axis=1) - theta.min(axis=1)))
    assert spreads[1] < spreads[0] / 5
    assert spreads[1] < 0.05


def test_fixed_seed_reproducible():
    data, _ = generate_case(1, 1, 1.0, seed=8)
    prior = IntensifiedPrior(PenaltyWeights.tied(0.1, 0.2, 3))
    c = PosteriorControls(burn_in=50, n_keep=100, thinning=2, seed=17)
    d1 = gibbs_sample(data, prior, c)
    d2 = gibbs_sample(data, prior, c)
    assert np.array_equal(d1.draws, d2.draws)
    d3 = gibbs_sample(data, prior, PosteriorControls(50, 100, 2, seed=18))
    assert not np.array_equal(d1.draws, d3.draws)


def test_log_predictive_examples():
    point = SvcObservation(y=0.0, x_tilde=np.array([1.0]), psi=1)
    single = make_draws([[0.5]])
    from scipy.stats import norm

    assert log_predictive(single, point) == pytest.approx(norm.logpdf(0.0, 0.5, 1.0))

    # two draws with equal densities d -> log d exactly
    equal = make_draws([[0.5], [-0.5]])
    assert log_predictive(equal, point) == pytest.approx(norm.logpdf(0.0, 0.5, 1.0))

    # densities 0.1 and 0.3 -> log 0.2
    y1 = np.sqrt(-2 * np.log(0.1 * np.sqrt(2 * np.pi)))
    y2 = np.sqrt(-2 * np.log(0.3 * np.sqrt(2 * np.pi)))
    two = make_draws([[y1], [y2]])
    point0 = SvcObservation(y=0.0, x_tilde=np.array([1.0]), psi=1)
    assert log_predictive(two, point0) == pytest.approx(np.log(0.2), abs=1e-12)


def test_predictive_moments_examples():
    point = SvcObservation(y=0.0, x_tilde=np.array([1.0]), psi=1)
    degenerate = make_draws([[0.7]] * 5)
    m = predictive_moments(degenerate, point)
    assert m["var_logf"] == pytest.approx(0.0, abs=1e-15)

    # log densities a, b -> population variance (a-b)^2/4
    a_y = np.sqrt(2.0)  # log f = -0.5 log(2pi) - 1
    draws = make_draws([[0.0], [2.0]])
    pt = SvcObservation(y=2.0, x_tilde=np.array([1.0]), psi=1)
    mm = predictive_moments(draws, pt)
    # log f values: residuals 2 and 0 -> logs c-2 and c
    assert mm["var_logf"] == pytest.approx(1.0, abs=1e-12)
    assert mm["var_logf"] == pytest.approx(
        mm["mean_logf_sq"] - mm["mean_logf"] ** 2, abs=1e-12)


def test_predictive_integrates_to_one():
    data, _ = generate_case(1, 1, 1.0, seed=10)
    prior = IntensifiedPrior(PenaltyWeights.tied(0.0, 0.3, 3))
    draws = gibbs_sample(data, prior,
                         PosteriorControls(burn_in=200, n_keep=400, thinning=1, seed=3))
    x = np.array([0.7, -1.2, 0.4])
    ys = np.linspace(-60, 60, 40001)
    dens = np.zeros_like(ys)
    for i, y in enumerate(ys):
        dens[i] = np.exp(log_predictive(draws, SvcObservation(y, x, 2)))
    integral = np.trapezoid(dens, ys)
    assert integral == pytest.approx(1.0, abs=1e-6)


def test_log_predictive_invariances():
    data, _ = generate_case(1, 1, 1.0, seed=11)
    prior = IntensifiedPrior(PenaltyWeights.tied(0.0, 0.2, 3))
    draws = gibbs_sample(data, prior,
                         PosteriorControls(burn_in=100, n_keep=200, thinning=1, seed=4))
    base = log_predictive_batch(draws, data)
    perm = np.random.default_rng(0).permutation(draws.n_draws)
    permuted = make_draws(draws.draws[perm], sigma2=1.0, p_tilde=3)
    assert np.allclose(log_predictive_batch(permuted, data), base)
    doubled = make_draws(np.vstack([draws.draws, draws.draws]), sigma2=1.0, p_tilde=3)
    assert np.allclose(log_predictive_batch(doubled, data), base)


def test_gibbs_matches_quadrature_posterior():
    """Exact-oracle check on a 2-region, 1-variable toy: posterior moments from
    dense 2-D quadrature of likelihood x fused-Laplace prior."""
    rng = np.random.default_rng(21)
    g = RegionGraph(2, ((2, 1),))
    n = 12
    psi = np.array([1, 2] * 6)
    x = rng.normal(size=(n, 1))
    y = 0.8 * x[:, 0] * (psi == 1) - 0.4 * x[:, 0] * (psi == 2) + rng.normal(size=n) * 0.7
    data = SvcDataset(y=y, x_tilde=x, psi=psi, graph=g, sigma2=0.49)
    lam1, lam2 = 0.08, 0.15
    prior = IntensifiedPrior(PenaltyWeights.tied(lam1, lam2, 1))

    grid = np.linspace(-3, 3, 701)
    t1, t2 = np.meshgrid(grid, grid, indexing="ij")
    mask1, mask2 = psi == 1, psi == 2
    s1 = float(x[mask1, 0] @ x[mask1, 0]); b1 = float(x[mask1, 0] @ y[mask1])
    s2 = float(x[mask2, 0] @ x[mask2, 0]); b2 = float(x[mask2, 0] @ y[mask2])
    loglik = (-(s1 * t1**2 - 2 * b1 * t1 + s2 * t2**2 - 2 * b2 * t2) / (2 * 0.49))
    logprior = -n * lam1 * (np.abs(t1) + np.abs(t2)) - n * lam2 * np.abs(t1 - t2)
    w = np.exp(loglik + logprior - (loglik + logprior).max())
    w /= w.sum()
    mean1 = float((w * t1).sum()); mean2 = float((w * t2).sum())
    var1 = float((w * (t1 - mean1) ** 2).sum())
    var2 = float((w * (t2 - mean2) ** 2).sum())

    draws = gibbs_sample(data, prior,
                         PosteriorControls(burn_in=2000, n_keep=40_000, thinning=1, seed=9))
    est_mean = draws.draws.mean(axis=0)
    est_var = draws.draws.var(axis=0)
    ess = draws.ess
    se_mean = np.sqrt(np.array([var1, var2]) / ess)
    assert abs(est_mean[0] - mean1) <= 4 * se_mean[0] + 1e-3
    assert abs(est_mean[1] - mean2) <= 4 * se_mean[1] + 1e-3
    assert est_var[0] == pytest.approx(var1, rel=0.1)
    assert est_var[1] == pytest.approx(var2, rel=0.1)


def test_degenerate_scale_resampling_counted():
    # all-zero responses at huge lambda drive differences under 1e-12
    g = RegionGraph(2, ((2, 1),))
    data = SvcDataset(y=np.zeros(8), x_tilde=np.ones((8, 1)),
                      psi=np.array([1, 2] * 4), graph=g, sigma2=1.0)
    prior = IntensifiedPrior(PenaltyWeights.tied(0.0, 400.0, 1))
    draws = gibbs_sample(data, prior,
                         PosteriorControls(burn_in=200, n_keep=500, thinning=1, seed=2))
    assert np.isfinite(draws.draws).all()
    assert draws.degenerate_resamples >= 0  # counter exposed and finite
