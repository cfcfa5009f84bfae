"""Concept-bottleneck mixture-of-experts for multimodal bags and graphs."""

__version__ = "0.1.0"

from .concepts import ModelVariant, parse_variant
from .estimator import ConceptMoEClassifier
from .model import ConceptMoEModel, ModelDims
from .synthcohort import CohortConfig, CohortSample, generate_cohort

__all__ = [
    "__version__",
    "CohortConfig",
    "CohortSample",
    "ConceptMoEClassifier",
    "ConceptMoEModel",
    "ModelDims",
    "ModelVariant",
    "generate_cohort",
    "parse_variant",
]
