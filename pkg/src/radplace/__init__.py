"""Radar place recognition with LiDAR-teacher knowledge distillation."""

__version__ = "0.1.0"

from .geometry import GridSpec, PointCloud, Pose, crop_to_range, radius_outlier_removal, rasterize_bev
from .losses import Margins
from .retrieval import DescriptorDB, RecallReport, recall_at_n

__all__ = [
    "GridSpec",
    "PointCloud",
    "Pose",
    "crop_to_range",
    "radius_outlier_removal",
    "rasterize_bev",
    "Margins",
    "DescriptorDB",
    "RecallReport",
    "recall_at_n",
    "__version__",
]
