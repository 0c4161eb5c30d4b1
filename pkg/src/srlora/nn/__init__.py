from .model import (
    FeatureSpectrum,
    ForwardResult,
    ModelConfig,
    ToyTransformer,
    adapter_names,
    extract_feature_spectrum,
    extract_features,
    forward,
    projection_name,
)
from .tape import Tape, Var, backward

__all__ = [
    "FeatureSpectrum",
    "ForwardResult",
    "ModelConfig",
    "Tape",
    "ToyTransformer",
    "Var",
    "adapter_names",
    "backward",
    "extract_feature_spectrum",
    "extract_features",
    "forward",
    "projection_name",
]
