"""Attribution maps, fidelity metrics, feature visualization and concept
vectors for small feed-forward networks."""

from .attribution import METHODS, AttributionMap, MethodConfig, explain
from .engine import (
    INPUT,
    AvgPool2D,
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    Model,
    ReLU,
    ReluBackwardMode,
    backward,
    forward,
    load_model,
    load_model_files,
    save_model,
    save_model_files,
)
from .errors import ModelError, NonFiniteError, TensorFormatError, XplikaError

__version__ = "0.1.0"

__all__ = [
    "INPUT",
    "METHODS",
    "AttributionMap",
    "AvgPool2D",
    "Conv2D",
    "Dense",
    "Flatten",
    "MaxPool2D",
    "MethodConfig",
    "Model",
    "ModelError",
    "NonFiniteError",
    "ReLU",
    "ReluBackwardMode",
    "TensorFormatError",
    "XplikaError",
    "backward",
    "explain",
    "forward",
    "load_model",
    "load_model_files",
    "save_model",
    "save_model_files",
]
