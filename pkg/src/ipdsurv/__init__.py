"""
Standardized survival curves for individual-patient-data meta-analysis.

Pipeline: load IPD -> fit a study-stratified flexible parametric PH model ->
standardize survival to a chosen reference population (approaches 0/A/B/C/D)
-> contrasts with jackknife SEs -> random-effects pooling and forest plots.
"""
from .contrast import (
    ContrastEstimate, conditional_hr, crude_hr, marginal_hr, risk_difference, rmst_difference, survival_ratio,
)
from .cox import CoxResult, fit_cox
from .data import (
    ColumnMapping, CovariateSchema, Dataset, IpdRecord, administrative_censor, center_covariates, describe,
    load_dataset, write_dataset,
)
from .errors import DataError, FitError, IpdError, MissingArtifactError
from .flexph import FitOptions, FlexPhModel, fit_flexph
from .forest import ForestPanel, render_forest
from .km import KmCurve, km_estimate
from .meta import MetaInput, MetaResult, pool, se_from_ci
from .simulate import ScenarioSpec, TruthRecord, generate, true_contrast
from .spline import SplineBasis
from .standardize import (
    CovariateProfile, StandardizedCurve, positivity_diagnostic, select_profile, standardize, standardize_0,
    standardize_A, standardize_B, standardize_C, standardize_D, standardize_profile,
)
from .uncertainty import JackknifeResult, PipelineEstimand, jackknife

__version__ = "0.1.0"

__all__ = [
    "ColumnMapping", "ContrastEstimate", "CovariateProfile", "CovariateSchema", "CoxResult", "DataError",
    "Dataset", "FitError", "FitOptions", "FlexPhModel", "ForestPanel", "IpdError", "IpdRecord",
    "JackknifeResult", "KmCurve", "MetaInput", "MetaResult", "MissingArtifactError", "PipelineEstimand",
    "ScenarioSpec", "SplineBasis", "StandardizedCurve", "TruthRecord", "administrative_censor",
    "center_covariates", "conditional_hr", "crude_hr", "describe", "fit_cox", "fit_flexph", "generate",
    "jackknife", "km_estimate", "load_dataset", "marginal_hr", "pool", "positivity_diagnostic",
    "render_forest", "risk_difference", "rmst_difference", "se_from_ci", "select_profile", "standardize",
    "standardize_0", "standardize_A", "standardize_B", "standardize_C", "standardize_D", "standardize_profile", "survival_ratio", "true_contrast", "write_dataset",
]
