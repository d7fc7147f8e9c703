"""Desk-scale selective unlearning testbed.

A tiny, exactly-differentiable language model plus a hierarchy-guided
dual-strategy unlearning engine (gradient projection, token intervention,
differential privacy, low-rank adapters) and the full evaluation suite
(forgetting, preservation, privacy attacks, hierarchy separation,
efficiency).
"""

from .corpus import Dataset, Example, generate_synthetic, split_by_subject
from .engine import UnlearnConfig, Variant, run_unlearning
from .hierarchy import ConceptMap, Level, LevelCoefficients, coefficients_for
from .metrics import EvalReport, mia_attack
from .model import GradientBundle, ModelState, init_model
from .privacy import NoiseSource, PrivacyParams, calibrate_sigma

__version__ = "0.1.0"

__all__ = [
    "ConceptMap",
    "Dataset",
    "EvalReport",
    "Example",
    "GradientBundle",
    "Level",
    "LevelCoefficients",
    "ModelState",
    "NoiseSource",
    "PrivacyParams",
    "UnlearnConfig",
    "Variant",
    "calibrate_sigma",
    "coefficients_for",
    "generate_synthetic",
    "init_model",
    "mia_attack",
    "run_unlearning",
    "split_by_subject",
    "__version__",
]
