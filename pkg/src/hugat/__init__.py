"""Region embeddings from a heterogeneous urban graph with two-level attention."""

from .graph import GraphConfig, HeterogeneousUrbanGraph, NodeType, RelationType, build_hug
from .metapath import BUILTIN_METAPATHS, MetaPath, compose_adjacency
from .attributes import RegionTargets, build_targets, hellinger_matrix, trip_conditionals
from .model import ModelConfig, forward, init_parameters
from .training import LossWeights, TrainingConfig, total_loss, train
from .synthetic import SyntheticCitySpec, generate_synthetic_city
from .evaluation import (
    EvalData, evaluate_clustering, evaluate_embeddings, kmeans, lasso_cv_fit, metapath_ablation,
    nearest_neighbors,
)

__version__ = "0.1.0"
