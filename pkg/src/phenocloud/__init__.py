"""Point-cloud phenotyping of potted plants."""

from .align import AlignConfig, align_cloud, segment_plane
from .cloud import Frame, PointCloud, estimate_normals, remove_statistical_outliers, voxel_downsample
from .ply import load_ply, write_ply
from .rate import FeatureMatrix, evaluate, knn_fit_select, stepwise_mlr
from .segment import SegmentationParams, segment_pot
from .spatial import SpatialIndex, knn
from .stemgraph import StemGraphParams, measure_leaf_angles
from .traits import TraitConfig, compute_traits

__version__ = "0.1.0"

__all__ = [
    "AlignConfig",
    "FeatureMatrix",
    "Frame",
    "PointCloud",
    "SegmentationParams",
    "SpatialIndex",
    "StemGraphParams",
    "TraitConfig",
    "align_cloud",
    "compute_traits",
    "estimate_normals",
    "evaluate",
    "knn",
    "knn_fit_select",
    "load_ply",
    "measure_leaf_angles",
    "remove_statistical_outliers",
    "segment_plane",
    "segment_pot",
    "stepwise_mlr",
    "voxel_downsample",
    "write_ply",
]
