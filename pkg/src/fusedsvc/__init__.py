"""Spatially varying coefficient regression with the generalized fused lasso,
Bayesian predictive densities under the intensified prior, and WAIC/PIIC
hyperparameter and prior-class selection."""

__version__ = "0.1.0"

from .graphs import (CoefficientGraph, Partition, RegionGraph,
                     build_coefficient_graph, connected_components,
                     standard_topology)
from .model import (SvcDataset, SvcObservation, TrueModel, estimate_sigma2,
                    expand_design, generate_case, loglik, loglik_grad,
                    loglik_hess, sample_from_true)
from .posterior import (IntensifiedPrior, PosteriorControls, PosteriorDraws,
                        gibbs_sample, log_predictive, predictive_moments)
from .solver import (GflConvergenceError, GflProblem, GflSolution, GflSolver,
                     PenaltyWeights, SolverControls, solve, solve_path,
                     verify_kkt)
from .criteria import (CriterionReport, HyperCurvature, empirical_risk,
                       hyper_curvature, make_report, piic1, piic2, waic)
from .selection import (CriterionEvaluator, SearchSpec, SelectionResult,
                        lambda_max, search_model1, search_model2, select_model)
from .experiments import (ExperimentConfig, ExperimentResult, run_experiment,
                          summarize)
from .spatial import GeoPoints, ingest_csv, kmeans, voronoi_adjacency

__all__ = [name for name in dir() if not name.startswith("_")]
