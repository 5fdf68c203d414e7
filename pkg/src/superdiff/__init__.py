"""Combine pretrained diffusion score models at sampling time.

Samples from mixtures (OR) or equal-density intersections (AND) of several
score models, tracking each model's log-density along the trajectory with
an Ito estimator that needs no divergence evaluations.
"""

from .integrate import IntegratorConfig, RunResult, run_superdiff
from .schedules import Cosine, VarianceExploding, VPLinear, make_schedule
from .score_models import GmmParams, GmmScoreModel
from .superpose import SuperposeMode, kappa_and, kappa_or

__version__ = "0.1.0"

__all__ = [
    "IntegratorConfig", "RunResult", "run_superdiff",
    "Cosine", "VarianceExploding", "VPLinear", "make_schedule",
    "GmmParams", "GmmScoreModel",
    "SuperposeMode", "kappa_and", "kappa_or",
]
