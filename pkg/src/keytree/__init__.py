"""Query-adaptive keyframe trees for long-video question answering."""

from keytree.clustering import ClusterAssignment, KMeansOptions, keyframe_of, kmeans, subcluster
from keytree.features import FeatureSet, load_features, normalize, validate, write_features
from keytree.pipeline import PipelineConfig, RunRecord, run_video
from keytree.tree import RelevanceLevel, TreeNode, VideoTree, collect_keyframes, export_tree

__version__ = "0.1.0"

__all__ = [
    "ClusterAssignment",
    "FeatureSet",
    "KMeansOptions",
    "PipelineConfig",
    "RelevanceLevel",
    "RunRecord",
    "TreeNode",
    "VideoTree",
    "collect_keyframes",
    "export_tree",
    "keyframe_of",
    "kmeans",
    "load_features",
    "normalize",
    "run_video",
    "subcluster",
    "validate",
    "write_features",
]
