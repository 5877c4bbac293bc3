"""Stress tests for dense feature vectors.

Drop dimensions (randomly or by PCA), quantize values with scalar
dictionaries, or both, then measure how much of a linear SVM's score
survives.
"""
__version__ = "0.1.0"

from .classifier import OneVsRestLinearSVC
from .featstore import DatasetSplit, FeatureMatrix, LabelSet, generate_synthetic, load_features, save_features
from .metrics import average_precision, compression_figure, mean_average_precision
from .numerics import EigenBasis, RngStream, fit_eigenbasis, l2_normalize
from .runner import SweepPlan, run_sweep
from .stressors import (
    FeatureCompressor,
    GlobalQuantizer,
    IdentityStressor,
    PCADimensionDrop,
    PerDimensionQuantizer,
    RandomDimensionDrop,
    schedule,
)

__all__ = [
    "DatasetSplit",
    "EigenBasis",
    "FeatureCompressor",
    "FeatureMatrix",
    "GlobalQuantizer",
    "IdentityStressor",
    "LabelSet",
    "OneVsRestLinearSVC",
    "PCADimensionDrop",
    "PerDimensionQuantizer",
    "RandomDimensionDrop",
    "RngStream",
    "SweepPlan",
    "average_precision",
    "compression_figure",
    "fit_eigenbasis",
    "generate_synthetic",
    "l2_normalize",
    "load_features",
    "mean_average_precision",
    "run_sweep",
    "save_features",
    "schedule",
]
