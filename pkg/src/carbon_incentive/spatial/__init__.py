"""Zone-level effectiveness: daily flow graphs, GCN embeddings, clustering, regression."""

from .analysis import (
    CATEGORIES,
    REGRESSORS,
    InfraRegression,
    RankDeficientError,
    ZoneClusterResult,
    categorize,
    cluster_zones,
    pca_2d,
    purity,
    regress_infrastructure,
    zone_outcomes,
)
from .gcn import (
    Batch,
    DivergenceError,
    GCNModel,
    GCNParams,
    backward,
    forward,
    gcn_forward,
    gcn_train,
    gradient_check,
    init_params,
    mse_loss,
    normalized_adjacency,
    regression_metrics,
)
from .graphs import FEATURE_NAMES, TARGET_NAMES, EmptyDayWarning, ZoneGraph, build_daily_graphs, node_features, node_targets

__all__ = [
    "CATEGORIES", "REGRESSORS", "InfraRegression", "RankDeficientError", "ZoneClusterResult", "categorize",
    "cluster_zones", "pca_2d", "purity", "regress_infrastructure", "zone_outcomes",
    "Batch", "DivergenceError", "GCNModel", "GCNParams", "backward", "forward", "gcn_forward", "gcn_train",
    "gradient_check", "init_params", "mse_loss", "normalized_adjacency", "regression_metrics",
    "FEATURE_NAMES", "TARGET_NAMES", "EmptyDayWarning", "ZoneGraph", "build_daily_graphs", "node_features",
    "node_targets",
]
