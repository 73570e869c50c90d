"""Synthetic 2D world with paired dense/sparse scans for desk-scale experiments.

The world is a square populated with wall segments and scatter disks. A
"lidar" scan casts many rays over a wide field of view with little noise;
a "radar" scan casts few rays over a narrow field of view and suffers
dropout, position noise and uniform clutter. Everything is deterministic
given its seed. z is always 0: the downstream pipeline only consumes BEV
density images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataio import save_point_cloud, save_split
from .geometry import PointCloud, Pose, sensor_frame, wrap_angle
from .mining import FrameLog, FrameRecord

RAY_T_MIN = 0.2  # m, ignore hits closer than this to the sensor


@dataclass(frozen=True)
class WorldSpec:
    size: float = 600.0            # side of the square world, meters
    n_walls: tuple[int, int] = (900, 1100)
    n_clusters: tuple[int, int] = (250, 350)
    wall_length: tuple[float, float] = (4.0, 18.0)
    cluster_radius: tuple[float, float] = (0.5, 2.5)

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("world size must be positive")
        for lo, hi in (self.n_walls, self.n_clusters, self.wall_length, self.cluster_radius):
            if lo > hi or lo < 0:
                raise ValueError("spec bounds must satisfy 0 <= min <= max")


@dataclass(frozen=True)
class World:
    seed: int
    size: float
    walls: np.ndarray     # (S, 4): x1, y1, x2, y2
    disks: np.ndarray     # (K, 3): cx, cy, r

    def contains(self, x: float, y: float) -> bool:
        return 0.0 <= x <= self.size and 0.0 <= y <= self.size


@dataclass(frozen=True)
class ScanSpec:
    modality: str                 # "lidar" or "radar"
    max_range: float = 40.0
    fov_deg: float = 180.0
    n_rays: int = 240
    dropout: float = 0.0          # probability of discarding a returned point
    noise_sigma: float = 0.0      # m, isotropic Gaussian on sensor-frame x/y
    clutter_rate: float = 0.0     # expected count of uniform clutter points

    def __post_init__(self):
        if self.modality not in ("lidar", "radar"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.max_range <= 0 or self.n_rays < 1:
            raise ValueError("max_range must be positive and n_rays >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        if not (0.0 < self.fov_deg <= 360.0):
            raise ValueError("fov_deg must be in (0, 360]")


def default_lidar_spec() -> ScanSpec:
    return ScanSpec(modality="lidar", max_range=40.0, fov_deg=180.0, n_rays=240,
                    dropout=0.02, noise_sigma=0.03, clutter_rate=0.0)


def default_radar_spec() -> ScanSpec:
    return ScanSpec(modality="radar", max_range=36.0, fov_deg=100.0, n_rays=56,
                    dropout=0.35, noise_sigma=0.45, clutter_rate=14.0)


def validate_scan_pair(lidar: ScanSpec, radar: ScanSpec) -> None:
    """The radar spec must be strictly poorer than the lidar spec."""
    ok = (
        radar.fov_deg < lidar.fov_deg
        and radar.n_rays < lidar.n_rays
        and radar.dropout > lidar.dropout
        and radar.noise_sigma > lidar.noise_sigma
    )
    if not ok:
        raise ValueError("radar spec must have narrower FOV, fewer rays, higher dropout and higher noise than lidar")


def generate_world(seed: int, spec: WorldSpec) -> World:
    """Sample walls and scatter disks uniformly over the world square."""
    rng = np.random.default_rng(seed)
    n_walls = int(rng.integers(spec.n_walls[0], spec.n_walls[1] + 1))
    n_disks = int(rng.integers(spec.n_clusters[0], spec.n_clusters[1] + 1))

    centers = rng.uniform(0.0, spec.size, size=(n_walls, 2))
    angles = rng.uniform(0.0, math.pi, size=n_walls)
    lengths = rng.uniform(spec.wall_length[0], spec.wall_length[1], size=n_walls)
    half = np.column_stack([np.cos(angles), np.sin(angles)]) * (lengths / 2.0)[:, None]
    walls = np.clip(
        np.column_stack([centers - half, centers + half]), 0.0, spec.size
    )

    disk_centers = rng.uniform(0.0, spec.size, size=(n_disks, 2))
    disk_radii = rng.uniform(spec.cluster_radius[0], spec.cluster_radius[1], size=n_disks)
    disks = np.column_stack([disk_centers, disk_radii]) if n_disks else np.zeros((0, 3))
    if n_walls == 0:
        walls = np.zeros((0, 4))
    return World(seed=seed, size=spec.size, walls=walls, disks=disks)


def _ray_wall_hits(origin: np.ndarray, dirs: np.ndarray, walls: np.ndarray, max_range: float) -> np.ndarray:
    """Per-ray distance to the nearest wall hit, inf when there is none."""
    t_best = np.full(dirs.shape[0], np.inf)
    if walls.shape[0] == 0:
        return t_best
    p1 = walls[:, 0:2]
    e = walls[:, 2:4] - p1                      # (S, 2)
    rel = p1 - origin                           # (S, 2)
    # Solve origin + t*d = p1 + u*e per (ray, segment) with 2D cross products.
    denom = dirs[:, 0:1] * e[:, 1] - dirs[:, 1:2] * e[:, 0]          # (R, S)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rel[:, 0] * e[:, 1] - rel[:, 1] * e[:, 0]) / denom       # (R, S)
        u = (dirs[:, 0:1] * rel[:, 1] - dirs[:, 1:2] * rel[:, 0])
        u = -u / denom
    valid = (np.abs(denom) > 1e-12) & (t >= RAY_T_MIN) & (t <= max_range) & (u >= 0.0) & (u <= 1.0)
    t = np.where(valid, t, np.inf)
    return np.minimum(t_best, t.min(axis=1))


def _ray_disk_hits(origin: np.ndarray, dirs: np.ndarray, disks: np.ndarray, max_range: float) -> np.ndarray:
    """Per-ray distance to the nearest disk hit, inf when there is none."""
    t_best = np.full(dirs.shape[0], np.inf)
    if disks.shape[0] == 0:
        return t_best
    rel = disks[:, 0:2] - origin                # (K, 2)
    b = dirs @ rel.T                            # (R, K), projection of center on ray
    c = np.sum(rel**2, axis=1) - disks[:, 2] ** 2
    disc = b**2 - c
    with np.errstate(invalid="ignore"):
        root = np.sqrt(np.where(disc >= 0.0, disc, np.nan))
    t_near = b - root
    t_far = b + root
    t = np.where(t_near >= RAY_T_MIN, t_near, t_far)
    valid = (disc >= 0.0) & (t >= RAY_T_MIN) & (t <= max_range)
    t = np.where(valid, t, np.inf)
    return np.minimum(t_best, t.min(axis=1))


def simulate_scan(world: World, pose: Pose, spec: ScanSpec, seed: int) -> PointCloud:
    """Ray-cast a scan from `pose`, returning points in the sensor frame.

    Applies, in order: dropout, Gaussian position noise, uniform clutter.
    """
    if not world.contains(pose.x, pose.y):
        raise ValueError(f"pose ({pose.x:.1f}, {pose.y:.1f}) outside world bounds")
    rng = np.random.default_rng(seed)
    fov = math.radians(spec.fov_deg)
    rel_angles = np.linspace(-fov / 2.0, fov / 2.0, spec.n_rays)
    angles = pose.heading + rel_angles
    dirs = np.column_stack([np.cos(angles), np.sin(angles)])
    origin = np.array([pose.x, pose.y])

    # Only primitives within reach can be hit. A segment's interior can be
    # closer than both endpoints by at most its own length.
    walls = world.walls
    if walls.shape[0]:
        near = np.minimum(
            np.linalg.norm(walls[:, 0:2] - origin, axis=1),
            np.linalg.norm(walls[:, 2:4] - origin, axis=1),
        )
        seg_len = np.linalg.norm(walls[:, 2:4] - walls[:, 0:2], axis=1)
        walls = walls[near <= spec.max_range + seg_len]
    disks = world.disks
    if disks.shape[0]:
        disks = disks[np.linalg.norm(disks[:, 0:2] - origin, axis=1) <= spec.max_range + disks[:, 2]]

    t = np.minimum(
        _ray_wall_hits(origin, dirs, walls, spec.max_range),
        _ray_disk_hits(origin, dirs, disks, spec.max_range),
    )
    hit = np.isfinite(t)
    hits_world = origin + dirs[hit] * t[hit, None]

    if spec.dropout > 0.0 and hits_world.shape[0]:
        keep = rng.random(hits_world.shape[0]) >= spec.dropout
        hits_world = hits_world[keep]

    pts = sensor_frame(hits_world, pose)
    if spec.noise_sigma > 0.0 and pts.shape[0]:
        pts = pts + rng.normal(0.0, spec.noise_sigma, size=pts.shape)

    n_clutter = int(rng.poisson(spec.clutter_rate)) if spec.clutter_rate > 0.0 else 0
    if n_clutter:
        ang = rng.uniform(-fov / 2.0, fov / 2.0, size=n_clutter)
        rad = rng.uniform(1.0, spec.max_range, size=n_clutter)
        clutter = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
        pts = np.vstack([pts, clutter]) if pts.shape[0] else clutter

    xyz = np.column_stack([pts, np.zeros(pts.shape[0])]) if pts.shape[0] else np.zeros((0, 3))
    return PointCloud(xyz)


@dataclass(frozen=True)
class SynthDatasetSpec:
    """Layout of the generated benchmark: places revisited by every split."""

    n_places: int = 50
    place_min_separation: float = 60.0
    border_margin: float = 50.0
    jitter_radius: float = 3.0
    heading_jitter: float = 0.15      # rad
    frames_per_place: dict = field(
        default_factory=lambda: {"train": 5, "validation": 1, "database": 6, "query": 2}
    )
    world: WorldSpec = field(default_factory=WorldSpec)
    lidar: ScanSpec = field(default_factory=default_lidar_spec)
    radar: ScanSpec = field(default_factory=default_radar_spec)
    cloud_format: str = ".bin"


def _sample_places(rng: np.random.Generator, spec: SynthDatasetSpec) -> np.ndarray:
    lo = spec.border_margin
    hi = spec.world.size - spec.border_margin
    if hi <= lo:
        raise ValueError("world too small for the requested border margin")
    places = []
    attempts = 0
    while len(places) < spec.n_places:
        attempts += 1
        if attempts > 200 * spec.n_places:
            raise RuntimeError(
                f"could not place {spec.n_places} sites {spec.place_min_separation} m apart in a "
                f"{spec.world.size} m world; reduce the count or separation"
            )
        cand = rng.uniform(lo, hi, size=2)
        if all(np.linalg.norm(cand - p) >= spec.place_min_separation for p in places):
            places.append(cand)
    return np.array(places)


def generate_dataset(out_dir: str | Path, spec: SynthDatasetSpec, seed: int) -> FrameLog:
    """Write a full benchmark dataset: clouds, pose log and split manifests.

    Every place is visited by every split with fresh pose jitter and scan
    noise, so database/query frames are true revisits of the training sites.
    """
    validate_scan_pair(spec.lidar, spec.radar)
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    world = generate_world(int(rng.integers(2**31)), spec.world)
    places = _sample_places(rng, spec)
    base_headings = rng.uniform(-math.pi, math.pi, size=spec.n_places)

    records: list[FrameRecord] = []
    splits: dict[str, list[int]] = {name: [] for name in spec.frames_per_place}
    frame_id = 0
    timestamp = 0.0
    for split_name, per_place in spec.frames_per_place.items():
        for p in range(spec.n_places):
            for _ in range(int(per_place)):
                r = rng.uniform(0.0, spec.jitter_radius)
                theta = rng.uniform(0.0, 2.0 * math.pi)
                pose = Pose(
                    x=float(places[p, 0] + r * math.cos(theta)),
                    y=float(places[p, 1] + r * math.sin(theta)),
                    heading=wrap_angle(base_headings[p] + rng.uniform(-spec.heading_jitter, spec.heading_jitter)),
                    timestamp=timestamp,
                )
                radar_rel = Path("clouds") / "radar" / f"{frame_id:06d}{spec.cloud_format}"
                lidar_rel = Path("clouds") / "lidar" / f"{frame_id:06d}{spec.cloud_format}"
                radar_seed = int(rng.integers(2**31))
                lidar_seed = int(rng.integers(2**31))
                save_point_cloud(out_dir / radar_rel, simulate_scan(world, pose, spec.radar, radar_seed))
                save_point_cloud(out_dir / lidar_rel, simulate_scan(world, pose, spec.lidar, lidar_seed))
                records.append(
                    FrameRecord(
                        frame_id=frame_id,
                        pose=pose,
                        radar_path=out_dir / radar_rel,
                        lidar_path=out_dir / lidar_rel,
                    )
                )
                splits[split_name].append(frame_id)
                frame_id += 1
                timestamp += 0.5

    log = FrameLog(records)
    log.save(out_dir)
    for name, ids in splits.items():
        save_split(out_dir / "splits" / f"{name}.txt", ids)
    return log
