"""Township-level rural wealth atlas from survey labels and imagery detections."""

from .atlas import WealthAtlas, predict_national
from .evaluate import cross_validate, kfold_split
from .features import FEATURE_NAMES, TownshipFeatures, rate
from .forest import ForestConfig, ForestModel, fit_forest, fit_tree
from .labels import SUB_INDEX_NAMES, compute_sub_indexes, fit_composite
from .spatial import assign_township, build_index
from .synth import SynthConfig, generate

__version__ = "0.1.0"

__all__ = [
    "FEATURE_NAMES",
    "SUB_INDEX_NAMES",
    "ForestConfig",
    "ForestModel",
    "SynthConfig",
    "TownshipFeatures",
    "WealthAtlas",
    "assign_township",
    "build_index",
    "compute_sub_indexes",
    "cross_validate",
    "fit_composite",
    "fit_forest",
    "fit_tree",
    "generate",
    "kfold_split",
    "predict_national",
    "rate",
]
