"""Bayesian spatiotemporal disease mapping for areal count data.

Expected counts by indirect standardization, latent Gaussian models with a
mixed spatial effect (scaled intrinsic CAR plus iid), random-walk and iid
weekly effects, and an iid area-week interaction under Poisson or
zero-inflated Poisson likelihoods; approximate inference by nested Laplace
marginals over a central composite hyperparameter design; DIC model
selection; relative-risk summaries; and a simulation/recovery harness.
"""

__version__ = "0.1.0"

from .fit import (
    DicResult,
    FitResult,
    compute_dic,
    explore_hyper,
    fit_at,
    fit_model,
    posterior_summary,
    select_by_dic,
)
from .graph import ArealGraph, connected_components, derive_queen_adjacency, load_edge_list
from .laplace import GaussianApprox, find_mode, log_marginal, mode_for
from .likelihoods import gaussian_loglik, poisson_loglik, zip_loglik
from .mcmc import mala_chain, mcmc_oracle
from .model import (
    ModelAssembly,
    ModelSpec,
    PriorSpec,
    assemble,
    joint_latent_precision,
    log_hyper_prior,
    pc_precision_rate,
)
from .panel import CauseClass, EpiPanel, ingest_panel, select_week
from .rates import (
    ExpectedCounts,
    expected_counts,
    period_rate,
    stratum_rates,
    weekly_rates,
    zero_fraction,
)
from .simulate import (
    SimScenario,
    lattice_graph,
    recovery_experiment,
    shift_experiment,
    simulate_panel,
)
from .structure import StructureMatrix, icar_structure, rw1_structure, scale_gv
from .summaries import (
    RRTable,
    covariate_rr,
    detect_sign_flip,
    spatiotemporal_rr,
    temporal_rr,
    weekly_covariate_series,
)

__all__ = [
    "__version__",
    "ArealGraph",
    "CauseClass",
    "DicResult",
    "EpiPanel",
    "ExpectedCounts",
    "FitResult",
    "GaussianApprox",
    "ModelAssembly",
    "ModelSpec",
    "PriorSpec",
    "RRTable",
    "SimScenario",
    "StructureMatrix",
    "assemble",
    "compute_dic",
    "connected_components",
    "covariate_rr",
    "derive_queen_adjacency",
    "detect_sign_flip",
    "expected_counts",
    "explore_hyper",
    "find_mode",
    "fit_at",
    "fit_model",
    "gaussian_loglik",
    "icar_structure",
    "ingest_panel",
    "joint_latent_precision",
    "lattice_graph",
    "load_edge_list",
    "log_hyper_prior",
    "log_marginal",
    "mala_chain",
    "mcmc_oracle",
    "mode_for",
    "pc_precision_rate",
    "period_rate",
    "poisson_loglik",
    "posterior_summary",
    "recovery_experiment",
    "rw1_structure",
    "scale_gv",
    "select_by_dic",
    "select_week",
    "shift_experiment",
    "simulate_panel",
    "spatiotemporal_rr",
    "stratum_rates",
    "temporal_rr",
    "weekly_covariate_series",
    "weekly_rates",
    "zero_fraction",
    "zip_loglik",
]
