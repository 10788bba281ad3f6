"""Preferred-mode inference and mode-shift carbon accounting."""

from .forest import DegenerateLabelsError, ForestParams, RandomForest, Tree
from .ledger import (
    EmissionFactorTable,
    ModeShiftLedger,
    annual_reduction_kg,
    build_ledger,
    citywide_extrapolation,
    citywide_summary,
    segment_carbon_summary,
    trip_reductions,
    user_activity,
)
from .model import (
    ClassifierReport,
    EncodingError,
    FeatureEncoder,
    ForestModel,
    binary_metrics,
    classifier_metrics,
    confusion_matrix,
    infer_preferred_modes,
    split_by_enrollment,
    train_forest,
)

__all__ = [
    "DegenerateLabelsError", "ForestParams", "RandomForest", "Tree",
    "EmissionFactorTable", "ModeShiftLedger", "annual_reduction_kg", "build_ledger", "citywide_extrapolation", "citywide_summary",
    "segment_carbon_summary", "trip_reductions", "user_activity",
    "ClassifierReport", "EncodingError", "FeatureEncoder", "ForestModel", "binary_metrics",
    "classifier_metrics", "confusion_matrix", "infer_preferred_modes", "split_by_enrollment",
    "train_forest",
]
