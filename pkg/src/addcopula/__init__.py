"""Bayesian conditional bivariate copulas with additive spline calibration."""
from .calibration import (
    CalibrationState,
    KnotGrid,
    SplineComponentState,
    StandardizationMap,
    evaluate_eta,
    standardize,
)
from .copulas import CopulaParameter, Family
from .cvml import CvmlReport, compare_models, cvml_estimate
from .mcmc import ProposalConfig, Trace, run_chain
from .model import ChainState, Dataset, Model, ModelSpec

__all__ = [
    "CalibrationState", "ChainState", "CopulaParameter", "CvmlReport",
    "Dataset", "Family", "KnotGrid", "Model", "ModelSpec", "ProposalConfig",
    "SplineComponentState", "StandardizationMap", "Trace", "compare_models",
    "cvml_estimate", "evaluate_eta", "run_chain", "standardize",
]
