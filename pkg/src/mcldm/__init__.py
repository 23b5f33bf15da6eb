"""Multi-conditioned latent diffusion with perception-prioritized loss weighting.

Estimators follow the scikit-learn conventions (``fit``/``transform``/
``sample``, ``get_params``); the functional building blocks live in the
submodules.
"""

from ._exceptions import ConfigurationError, ContractError, NotFittedError, TrainingDivergedError
from .codec import VQCodec
from .conditioning import ConditionTokens, concat_conditions
from .data import PairedDataset, RendererSpec, SamplePair, generate_dataset
from .ldm import LatentDiffusion
from .metrics import EvalReport, FeatureExtractor, MaskSegmenter
from .schedules import P2Config, Schedule, make_schedule

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractError",
    "NotFittedError",
    "TrainingDivergedError",
    "VQCodec",
    "ConditionTokens",
    "concat_conditions",
    "PairedDataset",
    "RendererSpec",
    "SamplePair",
    "generate_dataset",
    "LatentDiffusion",
    "EvalReport",
    "FeatureExtractor",
    "MaskSegmenter",
    "P2Config",
    "Schedule",
    "make_schedule",
]
