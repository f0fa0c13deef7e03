"""Predictive information criteria and empirical risk.

WAIC  = -sum_i log fpred_i + sum_i Var_post[log f_i]
PIIC1 = -sum_i log fpred_i + |J3|
PIIC2 = PIIC1 + tr(J1^-1 J2)   at the selected hyperparameter

where fpred is the Bayesian predictive density, |J3| the number of nonzero
fused blocks of the point estimate, and J1/J2 curvature/outer-product matrices
of the per-observation log predictive with respect to the hyperparameters,
estimated by finite differences with plug-in refits (the predictive equals the
plug-in density up to O(1/n), and MCMC noise would swamp second differences).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import SvcDataset, loglik_pointwise
from .posterior import PosteriorDraws, log_predictive_batch, predictive_moments_batch
from .solver import GflSolution, PenaltyWeights


@dataclass(frozen=True)
class CriterionReport:
    neg_log_pred_sum: float
    waic_penalty: float
    j3_count: int
    waic: float
    piic1: float
    lambda_weights: PenaltyWeights
    trace_term: float | None = None
    piic2: float | None = None
    diagnostics: dict = field(default_factory=dict, repr=False)

    def value(self, criterion: str) -> float:
        v = getattr(self, criterion)
        if v is None:
            raise ValueError(f"{criterion} not computed on this report")
        return float(v)

    def with_piic2(self, trace_term: float) -> "CriterionReport":
        return CriterionReport(
            neg_log_pred_sum=self.neg_log_pred_sum, waic_penalty=self.waic_penalty,
            j3_count=self.j3_count, waic=self.waic, piic1=self.piic1,
            lambda_weights=self.lambda_weights, trace_term=trace_term,
            piic2=self.piic1 + trace_term, diagnostics=self.diagnostics,
        )


class LaplacePosterior:
    """Gaussian approximation of the intensified posterior at the fitted
    zero/fusion structure.

    Zeros stay fixed, each fused block keeps one free coordinate, and the
    posterior of the block values is N(xi_hat blocks, P^-1) where P collects
    the likelihood curvature Z^T Z / sigma2 (Z the block-aggregated design)
    plus the local curvature w_f / |t_f| of every still-active Laplace factor
    (the IRLS-at-mode approximation; it vanishes asymptotically but keeps the
    posterior proper when a region carries fewer observations than variables).
    This is the structure-conditional limit the intensified-prior asymptotics
    describe, and it makes the predictive density, the WAIC variance penalty,
    and the empirical risk closed-form - hence noise-free, which the selection
    comparisons need: criterion surfaces are piecewise smooth in lambda and
    their minima snap to structure-transition edges instead of wandering with
    Monte-Carlo error.
    """

    def __init__(self, solution, dataset: SvcDataset, weights=None,
                 intensified: bool = True):
        if dataset.sigma2 is None:
            raise ValueError("sigma2 unresolved")
        self.sigma2 = float(dataset.sigma2)
        self.p_tilde = dataset.p_tilde
        self.blocks = solution.fusion_partition.blocks
        self.values = np.asarray(solution.fusion_partition.values, dtype=float)
        n_blocks = len(self.blocks)
        z = self._reduced_design(dataset)
        prec = z.T @ z / self.sigma2
        if weights is not None and n_blocks:
            prec = prec + self._prior_curvature(dataset, weights, intensified)
        ridge = 1e-10 * max(np.trace(prec), 1.0)
        self.cov = np.linalg.inv(prec + ridge * np.eye(n_blocks))

    def _prior_curvature(self, dataset: SvcDataset, weights, intensified: bool):
        """Active-factor local curvature in reduced coordinates: w/|xi| per
        nonzero penalized block value and w/|d| per edge between distinct
        blocks (within-block and zero-anchored factors are collapsed/fixed)."""
        from .graphs import build_coefficient_graph

        pt = dataset.p_tilde
        scale = dataset.n if intensified else 1.0
        lam1 = np.asarray(weights.lambda1, dtype=float).copy()
        if dataset.intercept:
            lam1[-1] = 0.0
        lam2 = np.asarray(weights.lambda2, dtype=float)
        block_of = {}
        for b, block in enumerate(self.blocks):
            for flat in block:
                block_of[flat] = b
        n_blocks = len(self.blocks)
        prec = np.zeros((n_blocks, n_blocks))
        floor = 1e-8 * max(1.0, float(np.max(np.abs(self.values))) if n_blocks else 1.0)
        for b, block in enumerate(self.blocks):
            j = (block[0] - 1) % pt
            if lam1[j] > 0:
                prec[b, b] += len(block) * scale * lam1[j] / max(abs(self.values[b]), floor)
        graph = build_coefficient_graph(dataset.graph, pt)
        for a, c in graph.edges:
            ba, bc = block_of.get(a), block_of.get(c)
            if ba is None or bc is None or ba == bc:
                continue
            j = (a - 1) % pt
            if lam2[j] <= 0:
                continue
            w = scale * lam2[j] / max(abs(self.values[ba] - self.values[bc]), floor)
            prec[ba, ba] += w
            prec[bc, bc] += w
            prec[ba, bc] -= w
            prec[bc, ba] -= w
        return prec

    def _reduced_design(self, dataset: SvcDataset) -> np.ndarray:
        pt = dataset.p_tilde
        z = np.zeros((dataset.n, len(self.blocks)))
        for b, block in enumerate(self.blocks):
            for flat in block:
                m = (flat - 1) // pt + 1
                j = (flat - 1) % pt
                rows = dataset.psi == m
                z[rows, b] += dataset.x_tilde[rows, j]
        return z

    def moments_for(self, dataset: SvcDataset) -> tuple[np.ndarray, np.ndarray]:
        """(fitted mean, posterior variance of the fit) per observation."""
        z = self._reduced_design(dataset)
        mean = z @ self.values
        var = np.einsum("ij,jk,ik->i", z, self.cov, z)
        return mean, np.maximum(var, 0.0)

    def log_predictive(self, dataset: SvcDataset) -> np.ndarray:
        """log integral of f(y | xi) over the Gaussian posterior: a normal
        density with inflated variance sigma2 + var_fit."""
        mean, var = self.moments_for(dataset)
        total = self.sigma2 + var
        return -0.5 * np.log(2.0 * np.pi * total) - (dataset.y - mean) ** 2 / (2.0 * total)

    def logf_variance(self, dataset: SvcDataset) -> np.ndarray:
        """Var[log f(y_i | xi)] under the Gaussian posterior, closed form:
        with r the residual at the mean and v the fit variance,
        Var = v^2/(2 sigma^4) + r^2 v / sigma^4."""
        mean, var = self.moments_for(dataset)
        r2 = (dataset.y - mean) ** 2
        s2 = self.sigma2
        return var**2 / (2.0 * s2**2) + r2 * var / s2**2


def neg_log_predictive(source, dataset: SvcDataset) -> np.ndarray:
    """Per-observation -log predictive; source is PosteriorDraws (Monte-Carlo
    Bayesian predictive), a LaplacePosterior (closed form), or a coefficient
    vector (plug-in)."""
    if isinstance(source, PosteriorDraws):
        return -log_predictive_batch(source, dataset)
    if isinstance(source, LaplacePosterior):
        return -source.log_predictive(dataset)
    return -loglik_pointwise(dataset, np.asarray(source, dtype=float))


def waic(draws: PosteriorDraws, dataset: SvcDataset) -> float:
    logpred = log_predictive_batch(draws, dataset)
    _, var_logf = predictive_moments_batch(draws, dataset)
    return float(-logpred.sum() + var_logf.sum())


def piic1(source, dataset: SvcDataset, solution: GflSolution) -> float:
    return float(neg_log_predictive(source, dataset).sum() + solution.j3_count)


def make_report(source, dataset: SvcDataset, solution: GflSolution,
                weights: PenaltyWeights, diagnostics: dict | None = None) -> CriterionReport:
    """Assemble WAIC and PIIC1 from one fitted (solution, posterior) pair."""
    nlp = neg_log_predictive(source, dataset)
    neg_log_pred_sum = float(nlp.sum())
    if isinstance(source, PosteriorDraws):
        _, var_logf = predictive_moments_batch(source, dataset)
        penalty = float(var_logf.sum())
        kind = "mcmc"
    elif isinstance(source, LaplacePosterior):
        penalty = float(source.logf_variance(dataset).sum())
        kind = "laplace"
    else:
        penalty = 0.0
        kind = "plugin"
    diag = dict(diagnostics or {})
    diag.setdefault("predictive", kind)
    return CriterionReport(
        neg_log_pred_sum=neg_log_pred_sum,
        waic_penalty=penalty,
        j3_count=solution.j3_count,
        waic=neg_log_pred_sum + penalty,
        piic1=neg_log_pred_sum + solution.j3_count,
        lambda_weights=weights,
        diagnostics=diag,
    )


@dataclass(frozen=True)
class HyperCurvature:
    j1_hat: np.ndarray
    j2_hat: np.ndarray
    trace_term: float
    fd_step: float
    ridge_added: float
    first_derivs: np.ndarray = field(repr=False, default=None)  # (n, q)
    boundary_warning: bool = False
    fallback_q: bool = False   # trace replaced by q: J1 not PD or trace implausible

    @property
    def q(self) -> int:
        return self.j1_hat.shape[0]

    def robust(self) -> "HyperCurvature":
        """Clamp an unusable trace estimate to the information-identity value q.

        At an interior optimum J1 is positive definite and tr(J1^-1 J2) = q
        under correct specification; a finite-difference estimate with an
        indefinite J1, a negative trace, or a trace far beyond q signals that
        the local curvature could not be measured (coarse-grid optima sit off
        stationary points), so the dimension count is the defensible penalty.
        """
        q = self.q
        eig_min = float(np.linalg.eigvalsh(0.5 * (self.j1_hat + self.j1_hat.T)).min())
        bad = eig_min <= 0.0 or self.trace_term < 0.0 or self.trace_term > 3.0 * q
        if not bad:
            return self
        return HyperCurvature(self.j1_hat, self.j2_hat, float(q), self.fd_step,
                              self.ridge_added, self.first_derivs,
                              self.boundary_warning, fallback_q=True)


def trace_from_matrices(j1: np.ndarray, j2: np.ndarray) -> tuple[float, float]:
    """tr((J1 + eps I)^-1 J2) with a minimal ridge when J1 is near singular."""
    j1 = np.atleast_2d(np.asarray(j1, dtype=float))
    j2 = np.atleast_2d(np.asarray(j2, dtype=float))
    j1s = 0.5 * (j1 + j1.T)
    norm = np.linalg.norm(j1s)
    eigmin = np.linalg.eigvalsh(j1s).min() if norm > 0 else 0.0
    ridge = 0.0
    if eigmin <= 1e-8 * max(norm, 1.0):
        ridge = 1e-8 * max(norm, 1.0)
    trace = float(np.trace(np.linalg.solve(j1s + ridge * np.eye(j1s.shape[0]), j2)))
    return trace, ridge


class HyperGroups:
    """Mapping from q free hyperparameter coordinates to PenaltyWeights entries.

    Each group is a list of ("l1"|"l2", variable index) pairs moved together;
    Model 1 ties all variables into one group per penalty kind.
    """

    def __init__(self, groups: list[list[tuple[str, int]]]):
        self.groups = groups

    @property
    def q(self) -> int:
        return len(self.groups)

    @classmethod
    def model1(cls, p_tilde: int, lambda1_enabled: bool = False,
               intercept: bool = False) -> "HyperGroups":
        groups = [[("l2", j) for j in range(p_tilde)]]
        if lambda1_enabled:
            last = p_tilde - 1 if intercept else p_tilde
            groups.append([("l1", j) for j in range(last)])
        return cls(groups)

    @classmethod
    def model2(cls, p_tilde: int, lambda1_enabled: bool = False,
               intercept: bool = False) -> "HyperGroups":
        groups: list[list[tuple[str, int]]] = [[("l2", j)] for j in range(p_tilde)]
        if lambda1_enabled:
            last = p_tilde - 1 if intercept else p_tilde
            groups += [[("l1", j)] for j in range(last)]
        return cls(groups)

    def apply(self, weights: PenaltyWeights, deltas: np.ndarray,
              parameterization: str) -> PenaltyWeights:
        l1 = weights.lambda1.copy()
        l2 = weights.lambda2.copy()
        for g, d in zip(self.groups, deltas):
            for kind, j in g:
                arr = l1 if kind == "l1" else l2
                arr[j] = arr[j] * np.exp(d) if parameterization == "log" else arr[j] + d
        return PenaltyWeights(l1, l2, model_class=2)


def hyper_curvature(lambda_hat: PenaltyWeights, groups: HyperGroups,
                    per_obs_logpred, fd_step: float = 1e-3,
                    parameterization: str = "linear",
                    scales=None,
                    boundary_warning: bool = False) -> HyperCurvature:
    """J1 (curvature) and J2 (score outer product) of the per-observation log
    predictive over the free hyperparameter coordinates, by finite differences.

    per_obs_logpred maps PenaltyWeights to an (n,) array. Derivatives are in
    the hyperparameters themselves ("linear", the criterion's definition) with
    per-coordinate step fd_step * scales[k] clamped so stencil points stay
    nonnegative (non-uniform three-point formulas); scales defaults to
    max(|lambda_k|, 1). The "log" variant multiplies each group by exp(+-h),
    which agrees at interior stationary points but destroys all sensitivity
    when the selected lambda is small, so it exists for the invariance check
    only.
    """
    if parameterization not in ("log", "linear"):
        raise ValueError("parameterization must be 'log' or 'linear'")
    q = groups.q

    def group_value(k):
        kind, j = groups.groups[k][0]
        arr = lambda_hat.lambda1 if kind == "l1" else lambda_hat.lambda2
        return float(arr[j])

    def ev(deltas) -> np.ndarray:
        return np.asarray(per_obs_logpred(
            groups.apply(lambda_hat, np.asarray(deltas, dtype=float), parameterization)))

    center = ev(np.zeros(q))
    n = len(center)

    if parameterization == "log":
        h = fd_step
        plus, minus = [], []
        dp = np.full(q, h)
        for k in range(q):
            d = np.zeros(q)
            d[k] = h
            plus.append(ev(d))
            minus.append(ev(-d))
        first = np.column_stack([(plus[k] - minus[k]) / (2 * h) for k in range(q)])
        j1 = np.zeros((q, q))
        for k in range(q):
            j1[k, k] = -np.sum(plus[k] - 2 * center + minus[k]) / (h * h) / n
        for k in range(q):
            for m in range(k + 1, q):
                dpp = np.zeros(q); dpp[[k, m]] = h
                dpm = np.zeros(q); dpm[k] = h; dpm[m] = -h
                dmp = np.zeros(q); dmp[k] = -h; dmp[m] = h
                dmm = np.zeros(q); dmm[[k, m]] = -h
                mixed = np.sum(ev(dpp) - ev(dpm) - ev(dmp) + ev(dmm)) / (4 * h * h)
                j1[k, m] = j1[m, k] = -mixed / n
    else:
        if scales is None:
            scales = [max(abs(group_value(k)), 1.0) for k in range(q)]
        lam0 = np.array([group_value(k) for k in range(q)])
        up = np.array([fd_step * scales[k] for k in range(q)])
        down = np.array([min(up[k], lam0[k] * 0.75) for k in range(q)])
        plus, minus = [], []
        for k in range(q):
            d = np.zeros(q)
            d[k] = up[k]
            plus.append(ev(d))
            d = np.zeros(q)
            d[k] = -down[k]
            minus.append(ev(d))
        # non-uniform three-point first/second derivatives at lam0
        first_cols = []
        j1 = np.zeros((q, q))
        for k in range(q):
            a, b = down[k], up[k]
            fm, f0, fp = minus[k], center, plus[k]
            first_cols.append(((fp - f0) * a / b + (f0 - fm) * b / a) / (a + b))
            second = 2.0 * (fm / (a * (a + b)) - f0 / (a * b) + fp / (b * (a + b)))
            j1[k, k] = -np.sum(second) / n
        first = np.column_stack(first_cols)
        for k in range(q):
            for m in range(k + 1, q):
                def dvec(sk, sm):
                    d = np.zeros(q)
                    d[k] = up[k] if sk > 0 else -down[k]
                    d[m] = up[m] if sm > 0 else -down[m]
                    return ev(d)
                span_k = up[k] + down[k]
                span_m = up[m] + down[m]
                mixed = np.sum(dvec(1, 1) - dvec(1, -1) - dvec(-1, 1) + dvec(-1, -1))
                j1[k, m] = j1[m, k] = -mixed / (span_k * span_m) / n

    j2 = first.T @ first / n
    trace, ridge = trace_from_matrices(j1, j2)
    return HyperCurvature(j1_hat=j1, j2_hat=j2, trace_term=trace, fd_step=fd_step,
                          ridge_added=ridge, first_derivs=first,
                          boundary_warning=boundary_warning)


def piic2(report: CriterionReport, curvature: HyperCurvature) -> float:
    return float(report.piic1 + curvature.trace_term)


def empirical_risk(source, test_dataset: SvcDataset) -> float:
    """Average negative log predictive density on an independent test sample."""
    return float(neg_log_predictive(source, test_dataset).mean())
