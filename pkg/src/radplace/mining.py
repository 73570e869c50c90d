"""Pose-tagged frame log and triplet tuple sampling.

Positives come from inside a small radius around the anchor, negatives from
beyond a much larger one; frames in the annulus between the two radii are
never used. Defaults follow the training setup: 10 m / 50 m, 1 positive,
4 negatives.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose

POSES_FILENAME = "poses.csv"
POSE_FIELDS = ["frame_id", "timestamp", "x", "y", "heading", "radar", "lidar"]


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    pose: Pose
    radar_path: Path | None = None
    lidar_path: Path | None = None


@dataclass(frozen=True)
class TrainingTuple:
    anchor_id: int
    positive_ids: tuple[int, ...]
    negative_ids: tuple[int, ...]

    def all_ids(self) -> tuple[int, ...]:
        return (self.anchor_id, *self.positive_ids, *self.negative_ids)


class FrameLog:
    """Ordered frames with unique ids, poses and per-sensor cloud paths."""

    def __init__(self, records: list[FrameRecord]):
        self.records = list(records)
        self.by_id = {r.frame_id: r for r in self.records}
        if len(self.by_id) != len(self.records):
            raise ValueError("duplicate frame ids in log")
        self.positions = np.array(
            [[r.pose.x, r.pose.y] for r in self.records], dtype=np.float64
        ).reshape(len(self.records), 2)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def pose(self, frame_id: int) -> Pose:
        return self.by_id[frame_id].pose

    def require_paths(self, modality: str) -> None:
        attr = f"{modality}_path"
        missing = [r.frame_id for r in self.records if getattr(r, attr) is None]
        if missing:
            raise ValueError(f"{len(missing)} frames lack a {modality} cloud (first: {missing[0]})")

    def save(self, dataset_dir: str | Path) -> None:
        dataset_dir = Path(dataset_dir)
        dataset_dir.mkdir(parents=True, exist_ok=True)
        with open(dataset_dir / POSES_FILENAME, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(POSE_FIELDS)
            for r in self.records:
                writer.writerow(
                    [
                        r.frame_id,
                        f"{r.pose.timestamp:.6f}",
                        f"{r.pose.x:.6f}",
                        f"{r.pose.y:.6f}",
                        f"{r.pose.heading:.9f}",
                        _relpath(r.radar_path, dataset_dir),
                        _relpath(r.lidar_path, dataset_dir),
                    ]
                )

    @classmethod
    def load(cls, dataset_dir: str | Path) -> "FrameLog":
        dataset_dir = Path(dataset_dir)
        pose_file = dataset_dir / POSES_FILENAME
        if not pose_file.is_file():
            raise FileNotFoundError(f"pose log not found: {pose_file}")
        records = []
        with open(pose_file, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != POSE_FIELDS:
                raise ValueError(f"{pose_file}: expected header {','.join(POSE_FIELDS)}")
            for row in reader:
                pose = Pose(
                    x=float(row["x"]),
                    y=float(row["y"]),
                    heading=float(row["heading"]),
                    timestamp=float(row["timestamp"]),
                )
                records.append(
                    FrameRecord(
                        frame_id=int(row["frame_id"]),
                        pose=pose,
                        radar_path=_abspath(row["radar"], dataset_dir),
                        lidar_path=_abspath(row["lidar"], dataset_dir),
                    )
                )
        return cls(records)


def _relpath(path: Path | None, root: Path) -> str:
    if path is None:
        return ""
    path = Path(path)
    try:
        return path.relative_to(root).as_posix()
    except ValueError:
        return path.as_posix()


def _abspath(value: str, root: Path) -> Path | None:
    value = value.strip()
    if not value:
        return None
    path = Path(value)
    return path if path.is_absolute() else root / path


class PoseIndex:
    """Spatial index over frame positions answering exact radius queries."""

    def __init__(self, log: FrameLog):
        if len(log) == 0:
            raise ValueError("cannot index an empty frame log")
        self.log = log
        self.frame_ids = np.array([r.frame_id for r in log.records], dtype=np.int64)
        self._tree = cKDTree(log.positions)

    def within(self, xy, radius: float) -> np.ndarray:
        """Frame ids at distance <= radius from xy, ascending by id."""
        idx = self._tree.query_ball_point(np.asarray(xy, dtype=np.float64), r=radius)
        return np.sort(self.frame_ids[idx])

    def beyond(self, xy, radius: float) -> np.ndarray:
        """Frame ids at distance > radius from xy, ascending by id."""
        inside = set(self._tree.query_ball_point(np.asarray(xy, dtype=np.float64), r=radius))
        keep = [i for i in range(len(self.frame_ids)) if i not in inside]
        return np.sort(self.frame_ids[keep])


def build_pose_index(log: FrameLog) -> PoseIndex:
    return PoseIndex(log)


def sample_tuple(
    index: PoseIndex,
    anchor_id: int,
    rng: np.random.Generator,
    pos_radius: float = 10.0,
    neg_radius: float = 50.0,
    n_pos: int = 1,
    n_neg: int = 4,
) -> TrainingTuple | None:
    """Draw a training tuple around an anchor, or None when the anchor is unusable.

    Positives are uniform over frames within pos_radius of the anchor
    (anchor excluded, boundary inclusive); negatives are uniform over frames
    strictly beyond neg_radius.
    """
    if pos_radius <= 0 or neg_radius <= pos_radius:
        raise ValueError(f"need 0 < pos_radius < neg_radius, got {pos_radius}, {neg_radius}")
    anchor = index.log.pose(anchor_id)
    xy = (anchor.x, anchor.y)
    pos_pool = index.within(xy, pos_radius)
    pos_pool = pos_pool[pos_pool != anchor_id]
    neg_pool = index.beyond(xy, neg_radius)
    if len(pos_pool) < n_pos or len(neg_pool) < n_neg:
        return None
    positives = rng.choice(pos_pool, size=n_pos, replace=False)
    negatives = rng.choice(neg_pool, size=n_neg, replace=False)
    return TrainingTuple(
        anchor_id=int(anchor_id),
        positive_ids=tuple(int(i) for i in positives),
        negative_ids=tuple(int(i) for i in negatives),
    )
