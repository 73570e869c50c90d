"""Descriptor database, exact nearest-neighbor search and Recall@N.

Search is exact (full linear scan, vectorized); database sizes in this
project stay small enough that approximate indexes would only add a
correctness variable. A retrieval is correct when one of the top-N frames
lies within the ground-truth distance threshold (25 m by default).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose

MAGIC = b"RPDB"
FORMAT_VERSION = 1
MODALITIES = ("radar", "lidar")
DEFAULT_RECALL_NS = (1, 5, 10)
DEFAULT_THRESHOLD_M = 25.0


@dataclass
class RecallReport:
    recall_at: dict[int, float]
    n_queries: int
    threshold_m: float

    def __post_init__(self):
        ns = sorted(self.recall_at)
        values = [self.recall_at[n] for n in ns]
        if any(b < a for a, b in zip(values, values[1:])):
            raise ValueError(f"recall must be non-decreasing in N, got {self.recall_at}")

    def format_table(self, label: str = "") -> str:
        ns = sorted(self.recall_at)
        header = ("mode      " if label else "") + "  ".join(f"R@{n:<4d}" for n in ns) + "  queries  threshold_m"
        row = (f"{label:<10s}" if label else "") + "  ".join(
            f"{100.0 * self.recall_at[n]:5.1f} " for n in ns
        ) + f"  {self.n_queries:7d}  {self.threshold_m:.1f}"
        return header + "\n" + row


class DescriptorDB:
    """Frames with unit-norm descriptors, poses and a modality tag."""

    def __init__(self, dim: int, modality: str = "radar"):
        if dim < 1:
            raise ValueError(f"descriptor dimension must be >= 1, got {dim}")
        if modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")
        self.dim = dim
        self.modality = modality
        self._ids: list[int] = []
        self._id_set: set[int] = set()
        self._descs: list[np.ndarray] = []
        self._poses: list[Pose] = []
        self._matrix: np.ndarray | None = None  # (N, dim) cache, rebuilt lazily

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def frame_ids(self) -> np.ndarray:
        return np.array(self._ids, dtype=np.int64)

    @property
    def descriptors(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = (
                np.vstack(self._descs).astype(np.float64)
                if self._descs
                else np.zeros((0, self.dim))
            )
        return self._matrix

    def pose(self, frame_id: int) -> Pose:
        return self._poses[self._ids.index(frame_id)]

    def entries(self):
        return zip(self._ids, self._descs, self._poses)

    def add(self, frame_id: int, desc: np.ndarray, pose: Pose) -> None:
        desc = np.asarray(desc, dtype=np.float64).reshape(-1)
        if desc.shape[0] != self.dim:
            raise ValueError(f"descriptor dimension {desc.shape[0]} != database dimension {self.dim}")
        if frame_id in self._id_set:
            raise ValueError(f"duplicate frame id {frame_id}")
        norm = np.linalg.norm(desc)
        if not np.isfinite(norm) or abs(norm - 1.0) > 1e-3:
            raise ValueError(f"descriptor for frame {frame_id} is not unit norm (|d| = {norm:.6f})")
        self._ids.append(int(frame_id))
        self._id_set.add(int(frame_id))
        self._descs.append(desc)
        self._poses.append(pose)
        self._matrix = None

    def query_top_n(self, desc: np.ndarray, n: int) -> list[int]:
        """Exact n nearest frame ids by Euclidean distance, ties by ascending id."""
        if len(self) == 0:
            raise ValueError("cannot query an empty database")
        if not (1 <= n <= len(self)):
            raise ValueError(f"n must be in [1, {len(self)}], got {n}")
        desc = np.asarray(desc, dtype=np.float64).reshape(-1)
        if desc.shape[0] != self.dim:
            raise ValueError(f"query dimension {desc.shape[0]} != database dimension {self.dim}")
        d2 = self._squared_distances(desc)
        order = np.lexsort((self.frame_ids, d2))
        return [int(self._ids[i]) for i in order[:n]]

    def query_top_n_with_distances(self, desc: np.ndarray, n: int) -> list[tuple[int, float]]:
        ids = self.query_top_n(desc, n)
        desc = np.asarray(desc, dtype=np.float64).reshape(-1)
        lookup = {fid: i for i, fid in enumerate(self._ids)}
        d = np.sqrt(self._squared_distances(desc))
        return [(fid, float(d[lookup[fid]])) for fid in ids]

    def _squared_distances(self, desc: np.ndarray) -> np.ndarray:
        diff = self.descriptors - desc[None, :]
        return np.einsum("ij,ij->i", diff, diff)


def add(db: DescriptorDB, frame_id: int, desc: np.ndarray, pose: Pose) -> None:
    db.add(frame_id, desc, pose)


def query_top_n(db: DescriptorDB, desc: np.ndarray, n: int) -> list[int]:
    return db.query_top_n(desc, n)


def recall_at_n(
    db: DescriptorDB,
    queries: list[tuple[np.ndarray, Pose]],
    ns: tuple[int, ...] = DEFAULT_RECALL_NS,
    threshold_m: float = DEFAULT_THRESHOLD_M,
) -> RecallReport:
    """Fraction of queries whose top-N retrieval contains a frame within threshold_m.

    Ns larger than the database are evaluated over the whole database.
    """
    if len(db) == 0 or not queries:
        raise ValueError("recall needs a non-empty database and at least one query")
    ns = tuple(sorted(set(int(n) for n in ns)))
    if ns[0] < 1:
        raise ValueError(f"N values must be >= 1, got {ns}")
    max_n = min(max(ns), len(db))
    positions = np.array([[p.x, p.y] for p in db._poses])
    id_row = {fid: i for i, fid in enumerate(db._ids)}
    correct = {n: 0 for n in ns}
    for desc, pose in queries:
        top = db.query_top_n(desc, max_n)
        q = np.array([pose.x, pose.y])
        dists = np.linalg.norm(positions[[id_row[f] for f in top]] - q, axis=1)
        for n in ns:
            if np.any(dists[: min(n, max_n)] <= threshold_m):
                correct[n] += 1
    return RecallReport(
        recall_at={n: correct[n] / len(queries) for n in ns},
        n_queries=len(queries),
        threshold_m=threshold_m,
    )


def save_db(path: str | Path, db: DescriptorDB) -> None:
    """Write the database: fixed header, then fixed-width records.

    Header: magic, version u32, modality u8, dim u32, count u64 (little endian).
    Record: frame_id i64, x f64, y f64, heading f64, timestamp f64, desc f32*dim.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rec_dtype = _record_dtype(db.dim)
    rows = np.zeros(len(db), dtype=rec_dtype)
    for k, (fid, desc, pose) in enumerate(db.entries()):
        rows[k] = (fid, pose.x, pose.y, pose.heading, pose.timestamp, desc.astype(np.float32))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IBIQ", FORMAT_VERSION, MODALITIES.index(db.modality), db.dim, len(db)))
        rows.tofile(f)


def load_db(path: str | Path) -> DescriptorDB:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a descriptor database (bad magic {magic!r})")
        version, modality_idx, dim, count = struct.unpack("<IBIQ", f.read(struct.calcsize("<IBIQ")))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        rows = np.fromfile(f, dtype=_record_dtype(dim), count=count)
    if rows.shape[0] != count:
        raise ValueError(f"{path}: truncated database ({rows.shape[0]} of {count} records)")
    db = DescriptorDB(dim=dim, modality=MODALITIES[modality_idx])
    for row in rows:
        db.add(
            int(row["frame_id"]),
            np.asarray(row["desc"], dtype=np.float64),
            Pose(x=float(row["x"]), y=float(row["y"]), heading=float(row["heading"]), timestamp=float(row["ts"])),
        )
    return db


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype(
        [("frame_id", "<i8"), ("x", "<f8"), ("y", "<f8"), ("heading", "<f8"), ("ts", "<f8"), ("desc", "<f4", (dim,))]
    )
