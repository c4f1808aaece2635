"""Learned k-distance filters for exact reverse k-nearest-neighbor queries."""

from .bounds import AggMode, BoundSet, aggregate, compute_residuals, evaluate_bounds
from .cop import CopModel, cop_bounds, fit_cop
from .core import (
    Dataset,
    KDistNormParams,
    KDistTable,
    Metric,
    ZScoreParams,
    kdist_norm_apply,
    kdist_norm_fit,
    kdist_norm_invert,
    load_dataset,
    zscore_apply,
    zscore_fit,
    zscore_invert,
)
from .engine import IndexArtifact, QueryEngine, QueryResult, load_index, rknn_query, save_index
from .oracle import build_kdist_table, knn_query, nndist, rknn_bruteforce
from .regress import DecisionTreeModel, MlpConfig, MlpModel, TreeConfig, gradient_check
from .trainer import TrainConfig, random_search, train_reweighted

__version__ = "0.1.0"
