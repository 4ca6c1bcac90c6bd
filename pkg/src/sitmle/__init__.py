"""Causal effect estimation for one fully connected group under stratified interference."""

__version__ = "0.1.0"

from .data import (Affine, Count, ExposureSummary, Identity, OutcomeScale, Sample, Schema,
                   exposure_summary, load_sample, scale_outcome, write_sample)
from .estimators import (ContrastResult, EstimateResult, EstimatorOptions, aipw, direct_effect,
                         overall_effect_contrast, tmle)
from .glm import GlmFit, Link, ModelSpec, Role, fit_glm, parse_formula, predict
from .interventions import (AllControl, AllTreat, Bernoulli, CompleteRandomization,
                            ExplicitMarginals, RankTopS, check_aers, check_ers, marginalize)
from .msm import GroupEffect, MsmFit, fit_msm

__all__ = [
    "Affine", "AllControl", "AllTreat", "Bernoulli", "CompleteRandomization", "ContrastResult",
    "Count", "EstimateResult", "EstimatorOptions", "ExplicitMarginals", "ExposureSummary",
    "GlmFit", "GroupEffect", "Identity", "Link", "ModelSpec", "MsmFit", "OutcomeScale",
    "RankTopS", "Role", "Sample", "Schema", "aipw", "check_aers", "check_ers", "direct_effect",
    "exposure_summary", "fit_glm", "fit_msm", "load_sample", "marginalize",
    "overall_effect_contrast", "parse_formula", "predict", "scale_outcome", "tmle",
    "write_sample",
]
