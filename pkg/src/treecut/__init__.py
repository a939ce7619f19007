"""Class-agnostic point-cloud instance segmentation by searching the
tree-consistent cuts of a multi-threshold Euclidean clustering hierarchy."""

from .errors import (
    FormatError,
    GenerationError,
    InvalidInputError,
    InvalidParameterError,
    MissingScoreError,
    ScoringError,
    SizeOverflowError,
    TreecutError,
)
from .evaluation import EvalConfig, evaluate, instance_ap, under_over, worst_iou_mean
from .geometry import Box, GroundTruth, PointCloud, PointIndexSet, Segmentation, validate_segmentation
from .hierarchy import (
    DEFAULT_SCHEDULE,
    SCHEDULE_PRESETS,
    Forest,
    TreeNode,
    build_forest,
    connected_components,
    count_tree_consistent,
    enumerate_cuts,
    level_cut,
)
from .objectness import HeuristicParams, heuristic_score, make_scorer, vanilla_iou, weighted_iou
from .search import brute_force_opt, greedy_avg_seg, opt_min_seg, segment_forest
from .synthetic import SceneSpec, gen_synthetic

__version__ = "0.1.0"

__all__ = [
    "Box", "DEFAULT_SCHEDULE", "EvalConfig", "Forest", "FormatError", "GenerationError",
    "GroundTruth", "HeuristicParams", "InvalidInputError", "InvalidParameterError",
    "MissingScoreError", "PointCloud", "PointIndexSet", "SCHEDULE_PRESETS", "SceneSpec",
    "ScoringError", "Segmentation", "SizeOverflowError", "TreeNode", "TreecutError",
    "brute_force_opt", "build_forest", "connected_components", "count_tree_consistent",
    "enumerate_cuts", "evaluate", "gen_synthetic", "greedy_avg_seg", "heuristic_score",
    "instance_ap", "level_cut", "make_scorer", "opt_min_seg", "segment_forest",
    "under_over", "validate_segmentation", "vanilla_iou", "weighted_iou", "worst_iou_mean",
]
