"""Two-level network feature populations: training, mean-field dynamics and repopulation."""
from .errors import BoundViolation, ConfigError, DivergedTraining
from .model import Ensemble, FeatureMap, Hyper

__version__ = "0.1.0"

__all__ = ["BoundViolation", "ConfigError", "DivergedTraining", "Ensemble", "FeatureMap", "Hyper", "__version__"]
