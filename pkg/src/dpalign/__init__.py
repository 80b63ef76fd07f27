"""Differentially private optimizers, accounting and preference alignment for tiny policies."""

from .alignment_pipeline import PipelineSpec, make_pipeline_spec, run_pipeline
from .data_pipeline import AlignmentDataset, PreferenceTriple, generate_synthetic_preferences
from .dp_optimizers import DPOptimizer, DPOptimizerConfig
from .privacy_accounting import INFINITY, ZERO, PrivacyBudget, epsilon_for_sigma, sigma_for_budget

__version__ = "0.1.0"

__all__ = [
    "AlignmentDataset",
    "DPOptimizer",
    "DPOptimizerConfig",
    "INFINITY",
    "PipelineSpec",
    "PreferenceTriple",
    "PrivacyBudget",
    "ZERO",
    "epsilon_for_sigma",
    "generate_synthetic_preferences",
    "make_pipeline_spec",
    "run_pipeline",
    "sigma_for_budget",
]
