"""Streaming anomaly detection for heterogeneous event logs.

Events are typed tuples of entities; each entity gets a learned embedding,
trained with noise contrastive estimation under a shared multi-task loss.
Events are scored by discrete p-values under the exact conditional softmax,
and embeddings are retrained window by window with anchored regularization
and analyst feedback.
"""

from .errors import (ConfigError, DataError, EngineError, NumericError,
                     ParseError, SchemaConflictError)
from .kernels import available_backends, get_backend
from .model import ModelParams
from .schema import Catalog, Event
from .score import ScoredEvent, Scorer, Standardizer, fit_standardizer
from .stream import RetrainConfig, WindowReport, process_window, retrain
from .train import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "Catalog", "ConfigError", "DataError", "EngineError", "Event",
    "ModelParams", "NumericError", "ParseError", "RetrainConfig",
    "SchemaConflictError", "ScoredEvent", "Scorer", "Standardizer",
    "TrainConfig", "WindowReport", "available_backends", "fit",
    "fit_standardizer", "get_backend", "process_window", "retrain",
    "__version__",
]
