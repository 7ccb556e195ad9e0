"""Honest recursive partitioning for heterogeneous treatment effects."""

from causaltree.data import CausalDataset, DataError, SampleSplit, load_csv, split_sample, transformed_outcome
from causaltree.tree import GrowParams, LeafStats, Node, Tree, apply, candidate_splits, grow_tree, leaf_stats
from causaltree.criteria import CriterionSpec, parse_estimator
from causaltree.prune import CvConfig, PruneSequence, cost_complexity_sequence, fit_tree, prune, select_alpha
from causaltree.honest import LeafEstimate, WeightingConfig, adaptive_estimate_leaves, estimate_leaves, predict

__all__ = [
    "CausalDataset",
    "CriterionSpec",
    "CvConfig",
    "DataError",
    "GrowParams",
    "LeafEstimate",
    "LeafStats",
    "Node",
    "PruneSequence",
    "SampleSplit",
    "Tree",
    "WeightingConfig",
    "adaptive_estimate_leaves",
    "apply",
    "candidate_splits",
    "cost_complexity_sequence",
    "estimate_leaves",
    "fit_tree",
    "grow_tree",
    "leaf_stats",
    "load_csv",
    "parse_estimator",
    "predict",
    "prune",
    "select_alpha",
    "split_sample",
    "transformed_outcome",
]

__version__ = "0.1.0"
