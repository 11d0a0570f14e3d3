"""Changepoint detection for spatio-temporal ordered-categorical panels.

A latent Gaussian field with separable exponential space-time correlation
drives an ordinal-probit observation layer; the regression and covariance
regimes switch at an unknown week. Inference runs by Gibbs sampling with
slice-sampled cut points and decay parameters; model comparison uses
harmonic-mean marginal likelihoods and Bayes factors, and multiple
changepoints come from recursive binary segmentation.
"""

__version__ = "0.1.0"

from .conditionals import DecayParams, ModelState, Workspace, make_workspace
from .errors import InputError, NumericalError, StocpError
from .gibbs import FitConfig, TraceStore, gelman_rubin, init_chain, run_chains
from .panel import (
    CovariatePanel,
    DesignMatrix,
    OrdinalPanel,
    SpaceTimeGrid,
    assemble_design,
    build_covariates,
    build_panel,
    categorize_weekly_rate,
    death_covariate,
    standardize,
    vaccination_prevalence,
)
from .selection import (
    BayesFactor,
    SegmentationReport,
    bayes_factor,
    binary_segment,
    fit_nochange,
    harmonic_mean_marginal,
    observed_likelihood,
)
from .simulate import TrueParams, simulate_panel

__all__ = [
    "BayesFactor",
    "CovariatePanel",
    "DecayParams",
    "DesignMatrix",
    "FitConfig",
    "InputError",
    "ModelState",
    "NumericalError",
    "OrdinalPanel",
    "SegmentationReport",
    "SpaceTimeGrid",
    "StocpError",
    "TraceStore",
    "TrueParams",
    "Workspace",
    "assemble_design",
    "bayes_factor",
    "binary_segment",
    "build_covariates",
    "build_panel",
    "categorize_weekly_rate",
    "death_covariate",
    "fit_nochange",
    "gelman_rubin",
    "harmonic_mean_marginal",
    "init_chain",
    "make_workspace",
    "observed_likelihood",
    "run_chains",
    "simulate_panel",
    "standardize",
    "vaccination_prevalence",
]
