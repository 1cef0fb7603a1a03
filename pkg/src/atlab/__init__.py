"""atlab: a desk-scale adversarial-training laboratory.

Robust training objectives (PGD-AT, TRADES, interpolated, temporal-ensembling
variants), linf/l2 PGD attacks with oracles, and the diagnostic apparatus to
study gradient stability, complexity measures, and robust overfitting on
small models and datasets.
"""

__version__ = "0.1.0"

from . import attacks, complexity, data, diagnostics, evaluation, models, objectives, trainer
from .attacks import PerturbationSpec
from .data import AugmentationSpec, CorruptionSpec, Dataset, ExampleBatch
from .models import ArchSpec, ModelParameters
from .objectives import LossBreakdown, ObjectiveConfig
from .schedules import Schedule, schedule_value
from .trainer import EnsembleBuffer, OptimizerState, TrainResult, TrainRunConfig

__all__ = [
    "attacks", "complexity", "data", "diagnostics", "evaluation", "models",
    "objectives", "trainer",
    "PerturbationSpec", "AugmentationSpec", "CorruptionSpec", "Dataset",
    "ExampleBatch", "ArchSpec", "ModelParameters", "LossBreakdown",
    "ObjectiveConfig", "Schedule", "schedule_value", "EnsembleBuffer",
    "OptimizerState", "TrainResult", "TrainRunConfig",
]
