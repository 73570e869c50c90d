"""Point-cloud ingestion, range cropping, outlier removal and BEV rasterization.

Both sensors go through the same pipeline: crop to a common rectangular
range, optionally drop isolated points (radar only in practice), then
project to a bird's-eye-view density image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return (theta + math.pi) % TWO_PI - math.pi


@dataclass(frozen=True)
class Pose:
    """2D pose in the global frame: position (m), heading (rad, [-pi, pi))."""

    x: float
    y: float
    heading: float = 0.0
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)

    def distance_to(self, other: "Pose") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class GridSpec:
    """BEV grid: x maps to rows (height H), y to columns (width W).

    density_cap is the per-cell point count at which a pixel saturates to 1.
    """

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    height: int
    width: int
    density_cap: int = 10

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"empty grid extent: x [{self.x_min}, {self.x_max}), y [{self.y_min}, {self.y_max})")
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"grid dimensions must be positive, got {self.height}x{self.width}")
        if self.density_cap < 1:
            raise ValueError(f"density_cap must be >= 1, got {self.density_cap}")

    @property
    def cell_size_x(self) -> float:
        return (self.x_max - self.x_min) / self.height

    @property
    def cell_size_y(self) -> float:
        return (self.y_max - self.y_min) / self.width

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass
class PointCloud:
    """Points as an (N, 3) float64 array in the sensor frame, +x forward, +y left.

    Intensity is carried along when present but never used by the rasterizer.
    """

    points: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite coordinates")
        self.points = pts
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise ValueError(f"intensity length {inten.shape[0]} != point count {pts.shape[0]}")
            self.intensity = inten

    def __len__(self) -> int:
        return self.points.shape[0]

    def select(self, mask_or_idx) -> "PointCloud":
        inten = self.intensity[mask_or_idx] if self.intensity is not None else None
        return PointCloud(self.points[mask_or_idx], inten)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))


def crop_to_range(cloud: PointCloud, grid: GridSpec) -> PointCloud:
    """Keep points with x in [x_min, x_max) and y in [y_min, y_max), order preserved."""
    if len(cloud) == 0:
        return cloud.select(np.zeros(0, dtype=bool))
    x, y = cloud.points[:, 0], cloud.points[:, 1]
    mask = (x >= grid.x_min) & (x < grid.x_max) & (y >= grid.y_min) & (y < grid.y_max)
    return cloud.select(mask)


def radius_outlier_removal(cloud: PointCloud, radius: float = 0.4, min_neighbors: int = 2) -> PointCloud:
    """Drop points with fewer than min_neighbors other points within `radius` (3D distance).

    The point itself is not counted as its own neighbor. Order preserved.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if min_neighbors < 1:
        raise ValueError(f"min_neighbors must be >= 1, got {min_neighbors}")
    if len(cloud) == 0:
        return cloud
    tree = cKDTree(cloud.points)
    counts = tree.query_ball_point(cloud.points, r=radius, return_length=True)
    keep = (counts - 1) >= min_neighbors
    return cloud.select(keep)


def rasterize_bev(cloud: PointCloud, grid: GridSpec) -> np.ndarray:
    """Project a cloud to an HxW density image with values in [0, 1].

    Pixel (i, j) counts the points whose (x, y) falls in cell (i, j),
    clipped at grid.density_cap and divided by it. Cells are half-open:
    a point on a boundary belongs to the lower-index cell. z and intensity
    are ignored.
    """
    image = np.zeros(grid.shape, dtype=np.float32)
    inside = crop_to_range(cloud, grid)
    if len(inside) == 0:
        return image
    i = np.floor((inside.points[:, 0] - grid.x_min) / grid.cell_size_x).astype(np.int64)
    j = np.floor((inside.points[:, 1] - grid.y_min) / grid.cell_size_y).astype(np.int64)
    # Floating-point division can land an in-range point exactly on H or W.
    i = np.clip(i, 0, grid.height - 1)
    j = np.clip(j, 0, grid.width - 1)
    counts = np.zeros(grid.shape, dtype=np.int64)
    np.add.at(counts, (i, j), 1)
    np.minimum(counts, grid.density_cap, out=counts)
    image[:] = counts.astype(np.float32) / float(grid.density_cap)
    return image


def sensor_frame(points_world: np.ndarray, pose: Pose) -> np.ndarray:
    """Transform (N, 2) world-frame points into the sensor frame of `pose`."""
    delta = points_world - np.array([pose.x, pose.y])
    c, s = math.cos(-pose.heading), math.sin(-pose.heading)
    rot = np.array([[c, -s], [s, c]])
    return delta @ rot.T
