import numpy as np
import pytest

from fusedsvc.criteria import (HyperCurvature, HyperGroups, LaplacePosterior,
                               empirical_risk, hyper_curvature, make_report,
                               neg_log_predictive, piic1, piic2, trace_from_matrices,
                               waic)
from fusedsvc.graphs import RegionGraph
from fusedsvc.model import SvcDataset, generate_case, sample_from_true
from fusedsvc.posterior import (IntensifiedPrior, PosteriorControls, PosteriorDraws,
                                gibbs_sample)
from fusedsvc.solver import GflProblem, PenaltyWeights, solve


def toy_draws(matrix, sigma2=1.0, p_tilde=1):
    return PosteriorDraws(draws=np.asarray(matrix, dtype=float), burn_in=0,
                          thinning=1, seed=0, sigma2=sigma2, p_tilde=p_tilde)


def toy_dataset(y, x, psi, m=1, sigma2=1.0, edges=()):
    return SvcDataset(y=np.asarray(y, float), x_tilde=np.asarray(x, float),
                      psi=np.asarray(psi), graph=RegionGraph(m, edges), sigma2=sigma2)


class FakeSolution:
    def __init__(self, j3):
        self.j3_count = j3


def test_waic_degenerate_posterior_is_plugin():
    data = toy_dataset([0.4, -0.2], [[1.0], [1.0]], [1, 1])
    draws = toy_draws([[0.1]] * 6)
    from fusedsvc.model import loglik

    assert waic(draws, data) == pytest.approx(-loglik(data, np.array([0.1])), abs=1e-12)


def test_waic_hand_case_frozen_oracle():
    # one observation, two draws with log densities -1 and -3; the direct
    # arithmetic oracle gives neg_log_pred = -log((e^-1 + e^-3)/2)
    r1 = np.sqrt(2.0 * (1.0 - 0.5 * np.log(2 * np.pi)))
    r3 = np.sqrt(2.0 * (3.0 - 0.5 * np.log(2 * np.pi)))
    data = toy_dataset([0.0], [[1.0]], [1])
    draws = toy_draws([[r1], [r3]])
    expected_nlp = -np.log((np.exp(-1.0) + np.exp(-3.0)) / 2.0)
    assert expected_nlp == pytest.approx(1.5662191695, abs=1e-9)
    got = waic(draws, data)
    assert got == pytest.approx(expected_nlp + 1.0, abs=1e-9)   # penalty (a-b)^2/4 = 1


def test_waic_duplication_invariance():
    data, _ = generate_case(1, 1, 1.0, seed=2)
    prior = IntensifiedPrior(PenaltyWeights.tied(0.0, 0.1, 3))
    draws = gibbs_sample(data, prior, PosteriorControls(100, 300, 1, seed=1))
    doubled = toy_draws(np.vstack([draws.draws, draws.draws]), 1.0, 3)
    assert waic(doubled, data) == pytest.approx(waic(draws, data), abs=1e-10)


def test_piic1_examples_and_identity():
    data, _ = generate_case(1, 1, 1.0, seed=5)
    prior = IntensifiedPrior(PenaltyWeights.tied(0.0, 0.1, 3))
    draws = gibbs_sample(data, prior, PosteriorControls(100, 300, 1, seed=2))
    nlp = neg_log_predictive(draws, data).sum()
    assert piic1(draws, data, FakeSolution(0)) == pytest.approx(nlp)
    # fused {1,2},{3} per variable, all nonzero, p_tilde=3 -> 6 blocks
    assert piic1(draws, data, FakeSolution(6)) == pytest.approx(nlp + 6)
    sol = solve(GflProblem.from_dataset(data, PenaltyWeights.tied(0.0, 0.1, 3)))
    rep = make_report(draws, data, sol, PenaltyWeights.tied(0.0, 0.1, 3))
    assert rep.piic1 - rep.waic == pytest.approx(rep.j3_count - rep.waic_penalty)
    assert rep.waic_penalty >= 0.0


def test_trace_from_matrices_examples():
    t, ridge = trace_from_matrices(np.eye(3) * 0.7, np.eye(3) * 0.7)
    assert t == pytest.approx(3.0)
    t, _ = trace_from_matrices(np.array([[2.0]]), np.array([[0.5]]))
    assert t == pytest.approx(0.25)
    # near-singular J1 ridged, not failed
    t, ridge = trace_from_matrices(np.diag([1.0, 0.0]), np.diag([1.0, 0.0]))
    assert np.isfinite(t) and ridge > 0


def test_hyper_curvature_polynomial_self_test():
    # per-observation log predictive lam -> a*lam + b*lam^2/2 (b < 0)
    a, b = 0.8, -2.5
    lam_hat = PenaltyWeights.per_variable([0.0], [0.6])
    groups = HyperGroups.model2(1)

    def closure(weights):
        lam = weights.lambda2[0]
        return np.full(50, a * lam + b * lam**2 / 2.0)

    curv = hyper_curvature(lam_hat, groups, closure, fd_step=1e-3,
                           parameterization="linear", scales=[1.0])
    d_hat = curv.first_derivs[0, 0]
    b_hat = -curv.j1_hat[0, 0]
    a_hat = d_hat - b_hat * 0.6
    assert b_hat == pytest.approx(b, abs=1e-4)
    assert a_hat == pytest.approx(a, abs=1e-4)


def test_trace_reparameterization_invariance_at_stationary_point():
    # smooth synthetic surface with interior stationary lambda; log vs linear
    rng = np.random.default_rng(0)
    alpha = rng.normal(size=40) * 0.05
    lam_star = 0.7

    def closure(weights):
        lam = weights.lambda2[0]
        return alpha - (lam - lam_star) ** 2 / 2.0 + alpha * (lam - lam_star)

    lam_hat = PenaltyWeights.per_variable([0.0], [lam_star - float(np.mean(alpha))])
    groups = HyperGroups.model2(1)
    t_lin = hyper_curvature(lam_hat, groups, closure, fd_step=1e-3,
                            parameterization="linear", scales=[1.0]).trace_term
    t_log = hyper_curvature(lam_hat, groups, closure, fd_step=1e-3,
                            parameterization="log").trace_term
    assert t_lin == pytest.approx(t_log, abs=1e-3)


def test_piic2_examples():
    rep_inputs = make_report(
        toy_draws([[0.0], [0.1]]), toy_dataset([0.2], [[1.0]], [1]),
        FakeSolution(2), PenaltyWeights.tied(0.0, 0.1, 1))
    zero = HyperCurvature(np.array([[1.0]]), np.array([[0.0]]), 0.0, 1e-3, 0.0)
    assert piic2(rep_inputs, zero) == pytest.approx(rep_inputs.piic1)
    quarter = HyperCurvature(np.array([[2.0]]), np.array([[0.5]]), 0.25, 1e-3, 0.0)
    assert piic2(rep_inputs, quarter) == pytest.approx(rep_inputs.piic1 + 0.25)


def test_piic2_trace_positive_on_fitted_model2():
    from fusedsvc.posterior import PosteriorControls
    from fusedsvc.selection import (CriterionEvaluator, SearchSpec, search_model1,
                                    search_model2, model_trace_term)

    data, _ = generate_case(1, 1, 1.0, seed=12)
    ev = CriterionEvaluator(data, PosteriorControls(100, 200, 1), base_seed=3,
                            predictive="laplace")
    res1 = search_model1(data, SearchSpec(model_class=1, grid_kind="linear"), ev)
    res2 = search_model2(data, SearchSpec(model_class=2, grid_kind="linear"), ev,
                         tied_candidate=res1.best_lambda)
    curv = model_trace_term(data, ev, res2, 2, False)
    # J2 is an average outer product: PSD, so the ridged trace is >= 0
    assert np.linalg.eigvalsh(curv.j2_hat).min() >= -1e-12
    assert curv.trace_term >= -1e-8


def test_empirical_risk_conventions():
    data, true = generate_case(1, 1, 1.0, seed=20)
    big_test = sample_from_true(true, 100_000, seed=21)
    # plug-in at the true coefficients: risk -> conditional entropy
    risk = empirical_risk(true.theta, big_test)
    entropy = 0.5 * np.log(2 * np.pi * np.e * 1.0)
    assert entropy == pytest.approx(1.4189385, abs=1e-6)
    assert risk == pytest.approx(entropy, abs=0.02)
    # Gibbs' inequality: perturbed coefficients give strictly larger risk
    worse = empirical_risk(true.theta + 0.3, big_test)
    assert worse > risk


def test_report_observation_order_invariance():
    data, _ = generate_case(1, 1, 1.0, seed=30)
    prior = IntensifiedPrior(PenaltyWeights.tied(0.0, 0.15, 3))
    draws = gibbs_sample(data, prior, PosteriorControls(100, 400, 1, seed=5))
    sol = solve(GflProblem.from_dataset(data, PenaltyWeights.tied(0.0, 0.15, 3)))
    rep = make_report(draws, data, sol, PenaltyWeights.tied(0.0, 0.15, 3))
    perm = np.random.default_rng(1).permutation(data.n)
    shuffled = SvcDataset(y=data.y[perm], x_tilde=data.x_tilde[perm],
                          psi=data.psi[perm], graph=data.graph, sigma2=1.0)
    rep2 = make_report(draws, shuffled, sol, PenaltyWeights.tied(0.0, 0.15, 3))
    assert rep2.waic == pytest.approx(rep.waic, abs=1e-9)
    assert rep2.piic1 == pytest.approx(rep.piic1, abs=1e-9)


def test_laplace_posterior_closed_forms_against_mc():
    data, _ = generate_case(1, 1, 1.0, seed=9)
    w = PenaltyWeights.tied(0.0, 0.1, 3)
    sol = solve(GflProblem.from_dataset(data, w))
    lp = LaplacePosterior(sol, data, weights=w)
    rng = np.random.default_rng(0)
    zdraws = rng.multivariate_normal(lp.values, lp.cov, size=200_000)
    z = lp._reduced_design(data)
    fit = zdraws @ z.T
    logf = -0.5 * np.log(2 * np.pi) - (data.y[None, :] - fit) ** 2 / 2.0
    mx = logf.max(axis=0)
    mc_pred = np.log(np.exp(logf - mx).mean(axis=0)) + mx
    assert np.abs(lp.log_predictive(data) - mc_pred).max() < 5e-3
    assert np.abs(lp.logf_variance(data) - logf.var(axis=0)).max() < 2e-2
