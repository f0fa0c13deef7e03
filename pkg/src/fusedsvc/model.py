"""SVC data model: Gaussian likelihood, derivatives, and synthetic data generation.

A dataset holds n observations (y_i, x_tilde_i, psi_i) over a region graph.
The expanded design row is x_i = e_{psi_i} (x) x_tilde_i (block one-hot), and the
coefficient vector xi stacks theta_1, ..., theta_M region-major.

All log densities are the conditional density of y given x; the parameter-free
x-marginal is an additive constant in every comparison performed here and is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .graphs import RegionGraph, standard_topology


@dataclass(frozen=True)
class SvcObservation:
    y: float
    x_tilde: np.ndarray
    psi: int


@dataclass(frozen=True)
class SvcDataset:
    """Immutable observation arrays plus the region graph and noise handling.

    sigma2 is the known error variance, or None when it still has to be estimated
    (likelihood evaluations reject unresolved variance). When `intercept` is True
    the last column of x_tilde is a constant-1 column that never receives the
    sparsity penalty downstream.
    """

    y: np.ndarray
    x_tilde: np.ndarray
    psi: np.ndarray
    graph: RegionGraph
    sigma2: float | None = None
    intercept: bool = False

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        xt = np.asarray(self.x_tilde, dtype=float)
        psi = np.asarray(self.psi, dtype=np.int64)
        if xt.ndim != 2 or y.ndim != 1 or psi.ndim != 1:
            raise ValueError("y, psi must be 1-d and x_tilde 2-d")
        if not (len(y) == len(xt) == len(psi)) or len(y) < 1:
            raise ValueError("inconsistent or empty observation arrays")
        if not (np.isfinite(y).all() and np.isfinite(xt).all()):
            raise ValueError("non-finite values in data")
        if psi.min() < 1 or psi.max() > self.graph.m_regions:
            raise ValueError("region ids out of range")
        if self.sigma2 is not None and not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive when given")
        for name, val in (("y", y), ("x_tilde", xt), ("psi", psi)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p_tilde(self) -> int:
        return self.x_tilde.shape[1]

    @property
    def m_regions(self) -> int:
        return self.graph.m_regions

    @property
    def p(self) -> int:
        return self.m_regions * self.p_tilde

    def with_sigma2(self, sigma2: float) -> "SvcDataset":
        return replace(self, sigma2=sigma2)

    def observation(self, i: int) -> SvcObservation:
        return SvcObservation(float(self.y[i]), self.x_tilde[i].copy(), int(self.psi[i]))

    def design(self) -> np.ndarray:
        """Dense expanded design X (n x M*p_tilde)."""
        n, pt = self.x_tilde.shape
        X = np.zeros((n, self.p))
        cols = (self.psi - 1)[:, None] * pt + np.arange(pt)[None, :]
        np.put_along_axis(X, cols, self.x_tilde, axis=1)
        return X

    def suff_stats(self) -> tuple[np.ndarray, np.ndarray, float]:
        """(X^T X, X^T y, y^T y) assembled per region block."""
        pt = self.x_tilde.shape[1]
        xtx = np.zeros((self.p, self.p))
        xty = np.zeros(self.p)
        for m in range(1, self.m_regions + 1):
            idx = np.where(self.psi == m)[0]
            if len(idx) == 0:
                continue
            xm = self.x_tilde[idx]
            sl = slice((m - 1) * pt, m * pt)
            xtx[sl, sl] = xm.T @ xm
            xty[sl] = xm.T @ self.y[idx]
        return xtx, xty, float(self.y @ self.y)


def expand_design(obs: SvcObservation, m_regions: int) -> np.ndarray:
    """e_psi (x) x_tilde: block psi holds x_tilde, all other blocks zero."""
    if not 1 <= obs.psi <= m_regions:
        raise ValueError("psi out of range")
    pt = len(obs.x_tilde)
    x = np.zeros(m_regions * pt)
    x[(obs.psi - 1) * pt : obs.psi * pt] = obs.x_tilde
    return x


def _resolved_sigma2(dataset: SvcDataset) -> float:
    if dataset.sigma2 is None:
        raise ValueError("sigma2 unresolved: set it or estimate it before evaluating")
    return float(dataset.sigma2)


def residuals(dataset: SvcDataset, xi: np.ndarray) -> np.ndarray:
    pt = dataset.p_tilde
    theta = np.asarray(xi, dtype=float).reshape(dataset.m_regions, pt)
    fitted = np.einsum("ij,ij->i", dataset.x_tilde, theta[dataset.psi - 1])
    return dataset.y - fitted


def loglik(dataset: SvcDataset, xi: np.ndarray) -> float:
    """Sum over i of log N(y_i; x_i^T xi, sigma2)."""
    s2 = _resolved_sigma2(dataset)
    r = residuals(dataset, xi)
    return float(-0.5 * dataset.n * np.log(2.0 * np.pi * s2) - r @ r / (2.0 * s2))


def loglik_pointwise(dataset: SvcDataset, xi: np.ndarray) -> np.ndarray:
    s2 = _resolved_sigma2(dataset)
    r = residuals(dataset, xi)
    return -0.5 * np.log(2.0 * np.pi * s2) - r**2 / (2.0 * s2)


def loglik_grad(dataset: SvcDataset, xi: np.ndarray) -> np.ndarray:
    """Gradient sum_i x_i (y_i - x_i^T xi) / sigma2."""
    s2 = _resolved_sigma2(dataset)
    r = residuals(dataset, xi)
    pt = dataset.p_tilde
    grad = np.zeros(dataset.p)
    contrib = dataset.x_tilde * r[:, None] / s2
    np.add.at(grad.reshape(dataset.m_regions, pt), dataset.psi - 1, contrib)
    return grad


def loglik_hess(dataset: SvcDataset) -> np.ndarray:
    """Hessian -sum_i x_i x_i^T / sigma2 (constant in xi)."""
    s2 = _resolved_sigma2(dataset)
    xtx, _, _ = dataset.suff_stats()
    return -xtx / s2


@dataclass(frozen=True)
class TrueModel:
    """Generating model: stacked coefficients, region probabilities, noise level."""

    theta: np.ndarray          # length M*p_tilde, region-major
    p_psi: np.ndarray          # probability vector over regions
    sigma2: float
    x_var: float = 5.0         # variance of each explanatory coordinate
    graph: RegionGraph = field(default_factory=lambda: standard_topology(1))

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        p_psi = np.asarray(self.p_psi, dtype=float)
        if abs(p_psi.sum() - 1.0) > 1e-12:
            raise ValueError("p_psi must sum to 1")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        theta.setflags(write=False)
        p_psi.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "p_psi", p_psi)

    @property
    def m_regions(self) -> int:
        return len(self.p_psi)

    @property
    def p_tilde(self) -> int:
        return len(self.theta) // self.m_regions

    def theta_matrix(self) -> np.ndarray:
        """Coefficients as an (M, p_tilde) matrix."""
        return np.asarray(self.theta).reshape(self.m_regions, self.p_tilde)

    def population_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """(J, J theta) with J = E[x x^T] = blockdiag(p_m * x_var * I)."""
        pt = self.p_tilde
        diag = np.repeat(self.p_psi, pt) * self.x_var
        J = np.diag(diag)
        return J, diag * self.theta


def sample_from_true(true: TrueModel, n: int, seed, graph: RegionGraph | None = None) -> SvcDataset:
    """Draw n observations from the generating model with an explicit seed."""
    rng = np.random.default_rng(seed)
    g = graph if graph is not None else true.graph
    psi = rng.choice(np.arange(1, true.m_regions + 1), size=n, p=true.p_psi)
    x_tilde = rng.normal(0.0, np.sqrt(true.x_var), size=(n, true.p_tilde))
    theta = true.theta_matrix()
    mean = np.einsum("ij,ij->i", x_tilde, theta[psi - 1])
    y = mean + rng.normal(0.0, np.sqrt(true.sigma2), size=n)
    return SvcDataset(y=y, x_tilde=x_tilde, psi=psi, graph=g, sigma2=true.sigma2)


def _blocks(values, sizes) -> np.ndarray:
    return np.concatenate([np.full(s, v, dtype=float) for v, s in zip(values, sizes)])


def _equicorr(dim: int, diag: float, off: float) -> np.ndarray:
    return np.full((dim, dim), off) + (diag - off) * np.eye(dim)


# Experiment tables. Each theta entry is the per-variable vector across regions
# (columns of the M x p_tilde coefficient matrix); callables draw Setting-2
# coefficient vectors once per replicate.
_CASE1_THETA = [
    np.array([1.0, 1.0, 1.0]),
    np.array([2.0, -2.0, -3.5]),
    np.array([3.0, -3.0, 1.5]),
]
_CASE_TABLE: dict[tuple[int, int], dict] = {
    (1, 1): dict(n=20, p_psi=[1 / 3] * 3, theta=_CASE1_THETA),
    (1, 2): dict(n=35, p_psi=[1 / 3, 1 / 6, 1 / 2], theta=_CASE1_THETA),
    (2, 1): dict(
        n=45,
        p_psi=[0.2] * 5,
        theta=[
            np.ones(5),
            np.array([2.0, 2.0, 1.5, 2.5, 1.5]),
            np.array([3.0, -2.5, -3.0, 0.5, -0.5]),
        ],
    ),
    (3, 1): dict(
        n=45,
        p_psi=[0.2] * 5,
        theta=[
            np.array([1.0, 1.0, 1.0, -1.5, -1.5]),
            np.array([2.0, -2.0, -3.5, 0.5, -0.5]),
            np.array([3.0, -3.0, 1.5, -1.0, -2.5]),
        ],
    ),
    (4, 1): dict(
        n=45,
        p_psi=[0.2] * 5,
        theta=[
            np.array([1.0, 1.0, -1.5, -1.5, 5.0]),
            np.array([2.0, -2.0, -2.5, -0.5, -3.5]),
            np.array([3.0, -3.0, -1.0, 0.5, -5.0]),
        ],
    ),
    (5, 1): dict(
        n=400,
        p_psi=[1 / 50] * 50,
        theta=[
            np.ones(50),
            _blocks([-2.0, -1.5, -1.0, 0.5, 1.5], [10] * 5),
            _blocks([-3.0, -2.5, -2.0, -1.5, -1.0, 0.5, 1.5, 2.0, 2.5, 3.0], [5] * 10),
        ],
    ),
    (6, 1): dict(
        n=400,
        p_psi=[1 / 36] * 36,
        theta=[
            np.full(36, 2.0),
            _blocks(
                [-2.0, -1.5, -1.0, -2.0, -1.5, -1.0, -2.0, -1.5, -1.0,
                 0.5, 1.5, 2.0, 0.5, 1.5, 2.0, 0.5, 1.5, 2.0],
                [2] * 18,
            ),
            _blocks(
                [-3.0, -2.5, -2.0, -3.0, -2.5, -2.0, -1.5, -1.0, 0.5,
                 -1.5, -1.0, 0.5, 1.0, 2.0, 2.5, 1.0, 2.0, 2.5],
                [2] * 18,
            ),
        ],
    ),
    (7, 1): dict(
        n=400,
        p_psi=[1 / 36] * 36,
        theta=[
            _blocks([-2.0, 2.0], [18, 18]),
            _blocks(
                [-2.0, -1.5, -1.0, -2.0, -1.5, -1.0, -2.0, -1.5, -1.0,
                 1.0, 1.5, 2.0, 1.0, 1.5, 2.0, 1.0, 1.5, 2.0],
                [2] * 18,
            ),
            _blocks(
                [-3.0, -2.5, -3.0, -2.5, -2.0, -1.5, 0.5, 1.0, 0.5, 1.0, 1.5, 2.0],
                [3] * 12,
            ),
        ],
    ),
    (8, 1): dict(
        n=400,
        p_psi=[1 / 36] * 36,
        theta=[
            _blocks([-2.0, -1.0, -2.0, -1.0, -2.0, -1.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0], [3] * 12),
            np.concatenate([
                np.tile(_blocks([-2.0, -1.5, -1.0, -0.5], [2, 1, 2, 1]), 3),
                np.tile(_blocks([0.5, 1.0, 1.5, 2.0], [2, 1, 2, 1]), 3),
            ]),
            _blocks([-3.0, -1.5, -2.5, -1.0, -2.0, -0.5, 0.5, 2.0, 1.0, 2.5, 1.5, 3.0], [3] * 12),
        ],
    ),
}
# Setting 2 for cases 2-4 reuses Setting-1 coefficients with different n, p_psi.
_CASE_TABLE[(2, 2)] = dict(_CASE_TABLE[(2, 1)], n=50, p_psi=[0.1, 0.3, 0.2, 0.2, 0.2])
_CASE_TABLE[(3, 2)] = dict(_CASE_TABLE[(3, 1)], n=50, p_psi=[0.1, 0.3, 0.2, 0.2, 0.2])
_CASE_TABLE[(4, 2)] = dict(_CASE_TABLE[(4, 1)], n=50, p_psi=[0.1, 0.2, 0.1, 0.2, 0.4])


def _ones_times_scalar(m):
    def draw(rng):
        return np.ones(m) * rng.normal(0.0, np.sqrt(3.0))
    return draw


def _block_mix(block_sizes, z_var):
    def draw(rng):
        z = rng.normal(0.0, np.sqrt(z_var), size=len(block_sizes))
        return _blocks(z, block_sizes)
    return draw


def _mvn(cov):
    def draw(rng):
        return rng.multivariate_normal(np.zeros(cov.shape[0]), cov, method="cholesky")
    return draw


def _blockdiag(*mats):
    dim = sum(m.shape[0] for m in mats)
    out = np.zeros((dim, dim))
    at = 0
    for m in mats:
        out[at : at + m.shape[0], at : at + m.shape[0]] = m
        at += m.shape[0]
    return out


_CASE_TABLE[(5, 2)] = dict(
    n=400,
    p_psi=[1 / 50] * 50,
    theta=[_ones_times_scalar(50), _ones_times_scalar(50), _mvn(_equicorr(50, 5.0, 1.5))],
)
# Table quotes the all-ones mixing vector as length 50 even for M=36; the
# M-length vector is used (see notes on the known table inconsistency).
_CASE_TABLE[(6, 2)] = dict(
    n=400,
    p_psi=[1 / 36] * 36,
    theta=[_ones_times_scalar(36), _ones_times_scalar(36), _mvn(_equicorr(36, 5.0, 1.5))],
)
_CASE_TABLE[(7, 2)] = dict(
    n=400,
    p_psi=[1 / 36] * 36,
    theta=[
        _block_mix([18, 18], 3.0),
        _block_mix([18, 18], 3.0),
        _mvn(_blockdiag(_equicorr(18, 5.0, 0.5), _equicorr(18, 3.0, 0.9))),
    ],
)
_CASE_TABLE[(8, 2)] = dict(
    n=400,
    p_psi=[1 / 36] * 36,
    theta=[
        _block_mix([9, 9, 9, 9], 0.5),
        _block_mix([9, 9, 9, 9], 0.5),
        _mvn(_blockdiag(*[_equicorr(9, 5.0, 0.5)] * 4)),
    ],
)


def case_config(case_id: int, setting: int) -> dict:
    key = (int(case_id), int(setting))
    if key not in _CASE_TABLE:
        raise ValueError(f"unknown case/setting {key}")
    return _CASE_TABLE[key]


def generate_case(case_id: int, setting: int, sigma2: float, seed) -> tuple[SvcDataset, TrueModel]:
    """Generate one replicate of an experiment case (no intercept column)."""
    cfg = case_config(case_id, setting)
    graph = standard_topology(case_id)
    rng = np.random.default_rng(seed)
    cols = []
    for spec in cfg["theta"]:
        cols.append(spec(rng) if callable(spec) else np.asarray(spec, dtype=float))
    theta_mat = np.column_stack(cols)  # (M, p_tilde)
    true = TrueModel(
        theta=theta_mat.ravel(),
        p_psi=np.asarray(cfg["p_psi"], dtype=float),
        sigma2=float(sigma2),
        x_var=5.0,
        graph=graph,
    )
    data = sample_from_true(true, cfg["n"], rng, graph=graph)
    return data, true


def estimate_sigma2(dataset: SvcDataset, solution) -> float:
    """Degrees-of-freedom corrected residual variance: RSS / max(n - |J3|, 1)."""
    r = residuals(dataset, solution.xi_hat)
    df = max(dataset.n - solution.j3_count, 1)
    return float(r @ r / df)


def dataset_to_csv(dataset: SvcDataset, path) -> None:
    pt = dataset.p_tilde
    df = pd.DataFrame({"region": dataset.psi, "y": dataset.y})
    for j in range(pt):
        df[f"x{j + 1}"] = dataset.x_tilde[:, j]
    df.to_csv(path, index=False)


def dataset_from_csv(path, graph: RegionGraph, sigma2: float | None = None,
                     intercept: bool = False) -> SvcDataset:
    """Read `region,y,x1,...,xp`; optionally append a constant intercept column."""
    df = pd.read_csv(path)
    required = {"region", "y"}
    if not required.issubset(df.columns):
        raise ValueError(f"data CSV must have columns {sorted(required)} plus x1..xp")
    xcols = sorted((c for c in df.columns if c.startswith("x")), key=lambda c: int(c[1:]))
    if not xcols:
        raise ValueError("no covariate columns x1..xp found")
    x = df[xcols].to_numpy(dtype=float)
    if intercept:
        x = np.column_stack([x, np.ones(len(df))])
    return SvcDataset(
        y=df["y"].to_numpy(dtype=float),
        x_tilde=x,
        psi=df["region"].to_numpy(dtype=np.int64),
        graph=graph,
        sigma2=sigma2,
        intercept=intercept,
    )
