"""Bayesian spike-and-slab term selection for generalized additive mixed models."""
from .api import DesignConfig, fit, infer_schema, load_fit, save_fit
from .design import FullDesign, build_full_design
from .family import get_family
from .formula import ModelSpec, TermSpec, model_spec, parse_formula
from .sampler import HyperParams, McmcConfig, Sampler
from .summary import (
    FitResult,
    deviance_summary,
    format_summary,
    gelman_rubin,
    inclusion_probabilities,
    model_table,
    predict,
    term_importance,
)

__version__ = "0.1.0"
__all__ = [
    "DesignConfig", "fit", "infer_schema", "load_fit", "save_fit", "FullDesign",
    "build_full_design", "get_family", "ModelSpec", "TermSpec", "model_spec", "parse_formula",
    "HyperParams", "McmcConfig", "Sampler", "FitResult", "deviance_summary", "format_summary",
    "gelman_rubin", "inclusion_probabilities", "model_table", "predict", "term_importance",
]
