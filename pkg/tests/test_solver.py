import numpy as np
import pytest
from dataclasses import replace

from fusedsvc.graphs import RegionGraph, build_coefficient_graph, standard_topology
from fusedsvc.model import SvcDataset, generate_case, sample_from_true
from fusedsvc.solver import (GflConvergenceError, GflProblem, GflSolver, PenaltyWeights,
                             SolverControls, solve, solve_path, verify_kkt)

from oracles import random_problem, subgradient_solve

TIGHT = SolverControls(eps_abs=1e-12, eps_rel=1e-10, max_iter=500_000)


def test_penalty_weights_validation():
    with pytest.raises(ValueError):
        PenaltyWeights(np.array([1.0, 2.0]), np.array([1.0, 1.0]), model_class=1)
    with pytest.raises(ValueError):
        PenaltyWeights(np.array([-0.1]), np.array([0.0]))
    w = PenaltyWeights.tied(0.5, 1.0, 3)
    assert w.model_class == 1 and w.p_tilde == 3


def test_lambda_zero_recovers_ols():
    data, _ = generate_case(1, 1, 1.0, seed=42)
    sol = solve(GflProblem.from_dataset(data, PenaltyWeights.tied(0.0, 0.0, 3)))
    X = data.design()
    ols, *_ = np.linalg.lstsq(X, data.y, rcond=None)
    assert np.abs(sol.xi_hat - ols).max() <= 1e-8
    assert sol.kkt_residual <= 1e-8
    assert sol.j3_count == 9


def test_single_coefficient_soft_threshold_exact():
    g = RegionGraph(1)
    x = np.array([1.0, 2.0, 0.0, 0.0, 0.0])          # sum x^2 = 5
    y = np.array([4.0, 3.0, 0.0, 0.0, 0.0])          # sum xy = 10
    data = SvcDataset(y=y, x_tilde=x[:, None], psi=np.ones(5, dtype=int),
                      graph=g, sigma2=1.0)
    # n * lam1 * sigma2 = 3  ->  lam1 = 0.6
    prob = GflProblem.from_dataset(data, PenaltyWeights.tied(0.6, 0.0, 1), TIGHT)
    sol = solve(prob)
    assert sol.xi_hat[0] == pytest.approx((10 - 3) / 5, abs=1e-10)


def test_full_fusion_limit_is_pooled_fit():
    rng = np.random.default_rng(5)
    g = RegionGraph(2, ((2, 1),))
    x = rng.normal(size=(30, 1))
    y = rng.normal(size=30)
    psi = np.concatenate([np.ones(15, dtype=int), np.full(15, 2, dtype=int)])
    data = SvcDataset(y=y, x_tilde=x, psi=psi, graph=g, sigma2=1.0)
    sol = solve(GflProblem.from_dataset(data, PenaltyWeights.tied(0.0, 100.0, 1), TIGHT))
    pooled = float(x[:, 0] @ y) / float(x[:, 0] @ x[:, 0])
    assert np.allclose(sol.xi_hat, pooled, atol=1e-8)
    assert sol.j3_count == 1


def test_solver_matches_subgradient_oracle():
    rng = np.random.default_rng(777)
    checked = 0
    while checked < 10:
        prob = random_problem(rng)
        tight = replace(prob, controls=TIGHT)
        sol = GflSolver(tight).solve()
        rep = verify_kkt(tight, sol)
        if rep.margin < 0.01:      # (C2)-style near-critical instance, excluded
            continue
        oracle = subgradient_solve(prob)
        assert np.abs(sol.xi_hat - oracle).max() <= 1e-5
        checked += 1


def test_kkt_certificates_on_random_instances():
    rng = np.random.default_rng(31)
    for _ in range(8):
        prob = random_problem(rng)
        sol = GflSolver(replace(prob, controls=TIGHT)).solve()
        rep = verify_kkt(prob, sol)
        assert rep.max_violation <= 1e-6
        for v in list(rep.slack_a.values()) + list(rep.slack_b.values()):
            assert -1.0 <= v <= 1.0


def test_kkt_interior_slack_soft_threshold():
    # below threshold: xi = 0 and the certificate slack is sum(xy)/(n lam sig2)
    g = RegionGraph(1)
    x = np.array([1.0, 1.0, 0.0, 0.0, 0.0])          # sum x^2 = 2
    y = np.array([1.0, 1.0, 0.0, 0.0, 0.0])          # sum xy = 2
    data = SvcDataset(y=y, x_tilde=x[:, None], psi=np.ones(5, dtype=int),
                      graph=g, sigma2=1.0)
    prob = GflProblem.from_dataset(data, PenaltyWeights.tied(0.6, 0.0, 1), TIGHT)
    sol = solve(prob)
    assert sol.xi_hat[0] == pytest.approx(0.0, abs=1e-12)
    assert sol.zero_mask[0]
    rep = verify_kkt(prob, sol)
    assert rep.slack_a[1] == pytest.approx(2 / 3, abs=1e-8)


def test_rejects_nan_data():
    g = RegionGraph(1)
    with pytest.raises(ValueError):
        SvcDataset(y=np.array([np.nan]), x_tilde=np.array([[1.0]]),
                   psi=np.array([1]), graph=g, sigma2=1.0)


def test_nonconvergence_carries_state():
    data, _ = generate_case(1, 1, 1.0, seed=0)
    ctl = SolverControls(eps_abs=1e-14, eps_rel=1e-14, max_iter=3)
    with pytest.raises(GflConvergenceError) as err:
        solve(GflProblem.from_dataset(data, PenaltyWeights.tied(0.1, 0.1, 3), ctl))
    assert err.value.xi is not None
    assert err.value.iterations == 3
    assert np.isfinite(err.value.primal_res)


def test_solve_path_warm_equals_cold():
    data, _ = generate_case(1, 1, 1.0, seed=9)
    prob = GflProblem.from_dataset(data, PenaltyWeights.tied(0.0, 0.0, 3))
    grid = [PenaltyWeights.tied(0.0, v, 3) for v in np.geomspace(2.0, 1e-3, 6)]
    path = solve_path(prob, grid)
    assert all(not isinstance(s, Exception) for s in path)
    for w, sol in zip(grid, path):
        cold = solve(prob.with_weights(w))
        assert np.abs(sol.xi_hat - cold.xi_hat).max() <= 1e-6
    # single-element path behaves like solve
    only = solve_path(prob, [grid[0]])
    assert np.abs(only[0].xi_hat - path[0].xi_hat).max() <= 1e-6


def test_path_endpoints_fused_counts():
    data, _ = generate_case(1, 1, 1.0, seed=10)
    prob = GflProblem.from_dataset(data, PenaltyWeights.tied(0.0, 0.0, 3), TIGHT)
    small = solve(prob.with_weights(PenaltyWeights.tied(0.0, 1e-9, 3)))
    big = solve(prob.with_weights(PenaltyWeights.tied(0.0, 50.0, 3)))
    # generically M blocks per variable at tiny lambda2, one at lambda_max
    assert small.j3_count == 9
    assert big.j3_count == 3


def test_perturbation_optimality_probe():
    rng = np.random.default_rng(12)
    prob = replace(random_problem(rng), controls=TIGHT)
    solver = GflSolver(prob)
    sol = solver.solve()
    base = solver.objective(sol.xi_hat)
    for _ in range(100):
        delta = rng.normal(size=len(sol.xi_hat))
        delta *= 1e-3 / np.linalg.norm(delta)
        assert solver.objective(sol.xi_hat + delta) >= base - 1e-12


def test_duplicating_observations_invariant():
    data, _ = generate_case(1, 1, 1.0, seed=21)
    w = PenaltyWeights.tied(0.05, 0.08, 3)
    sol1 = solve(GflProblem.from_dataset(data, w, TIGHT))
    doubled = SvcDataset(y=np.tile(data.y, 2), x_tilde=np.tile(data.x_tilde, (2, 1)),
                         psi=np.tile(data.psi, 2), graph=data.graph, sigma2=1.0)
    sol2 = solve(GflProblem.from_dataset(doubled, w, TIGHT))
    assert np.abs(sol1.xi_hat - sol2.xi_hat).max() <= 1e-7


def test_region_permutation_equivariance():
    data, _ = generate_case(1, 1, 1.0, seed=33)
    w = PenaltyWeights.tied(0.0, 0.1, 3)
    sol = solve(GflProblem.from_dataset(data, w, TIGHT))
    perm = np.array([2, 3, 1])  # region m -> perm[m-1]
    g2 = RegionGraph(3, tuple(
        (max(perm[a - 1], perm[b - 1]), min(perm[a - 1], perm[b - 1]))
        for a, b in data.graph.edges))
    data2 = SvcDataset(y=data.y, x_tilde=data.x_tilde, psi=perm[data.psi - 1],
                       graph=g2, sigma2=1.0)
    sol2 = solve(GflProblem.from_dataset(data2, w, TIGHT))
    xi_perm = sol.xi_hat.reshape(3, 3)[np.argsort(perm)]
    assert np.abs(sol2.xi_hat.reshape(3, 3) - xi_perm).max() <= 1e-7
    assert sol2.j3_count == sol.j3_count
    assert sol2.objective == pytest.approx(sol.objective, rel=1e-9)


def test_structure_read_from_auxiliaries():
    data, _ = generate_case(1, 1, 1.0, seed=2)
    sol = solve(GflProblem.from_dataset(data, PenaltyWeights.tied(0.0, 0.6, 3), TIGHT))
    # partition blocks join same-variable coefficients only
    cg = build_coefficient_graph(data.graph, 3)
    for block in sol.fusion_partition.blocks:
        vars_in_block = {cg.variable_of(f) for f in block}
        assert len(vars_in_block) == 1
    assert sol.j3_count == len(sol.fusion_partition.blocks)
    assert not sol.zero_mask.any()  # no sparsity penalty


def test_population_problem_path_shrinkage():
    # path 1-2-3, J = (5/3) I, truth per variable (2, -2, -3.5): hand-derived
    # TV shrinkage moves the ends by lambda/c toward the middle
    _, true = generate_case(1, 1, 1.0, seed=0)
    J, Jtheta = true.population_moments()
    graph = build_coefficient_graph(true.graph, 3)
    lam2 = 0.05
    prob = GflProblem.from_moments(J, Jtheta, float(true.theta @ Jtheta), 1, 1.0,
                                   graph, PenaltyWeights.tied(0.0, lam2, 3), TIGHT)
    sol = solve(prob)
    c = (1 / 3) * 5.0
    shift = lam2 / c
    theta = sol.xi_hat.reshape(3, 3)
    assert np.allclose(theta[:, 0], 1.0, atol=1e-8)                    # fused in truth
    assert theta[0, 1] == pytest.approx(2.0 - shift, abs=1e-8)
    assert theta[1, 1] == pytest.approx(-2.0, abs=1e-8)
    assert theta[2, 1] == pytest.approx(-3.5 + shift, abs=1e-8)
    assert theta[0, 2] == pytest.approx(3.0 - shift, abs=1e-8)
    assert theta[1, 2] == pytest.approx(-3.0 + 2 * shift, abs=1e-8)
    assert theta[2, 2] == pytest.approx(1.5 - shift, abs=1e-8)
    # variable 1 collapses to one nonzero block
    blocks_var1 = [b for b in sol.fusion_partition.blocks if (b[0] - 1) % 3 == 0]
    assert len(blocks_var1) == 1 and len(blocks_var1[0]) == 3
