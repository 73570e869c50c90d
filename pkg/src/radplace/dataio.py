"""On-disk formats: point-cloud files and split manifests.

Cloud files come in two flavors:
  *.bin           flat little-endian float32 records of (x, y, z, intensity)
  *.txt/.xyz/.csv one point per line, 3 or 4 columns (x y z [intensity]),
                  whitespace- or comma-delimited

Split manifests are plain text, one frame id per line.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import PointCloud

BIN_RECORD_FLOATS = 4  # x, y, z, intensity


def load_point_cloud(path: str | Path) -> PointCloud:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"point-cloud file not found: {path}")
    if path.suffix == ".bin":
        raw = np.fromfile(path, dtype="<f4")
        if raw.size % BIN_RECORD_FLOATS != 0:
            raise ValueError(
                f"{path}: size {raw.size} floats is not a multiple of {BIN_RECORD_FLOATS} (x,y,z,intensity records)"
            )
        rec = raw.reshape(-1, BIN_RECORD_FLOATS).astype(np.float64)
        return PointCloud(rec[:, :3], rec[:, 3])
    delimiter = "," if path.suffix == ".csv" else None
    data = np.loadtxt(path, dtype=np.float64, delimiter=delimiter, ndmin=2)
    if data.size == 0:
        return PointCloud.empty()
    if data.shape[1] == 3:
        return PointCloud(data)
    if data.shape[1] == 4:
        return PointCloud(data[:, :3], data[:, 3])
    raise ValueError(f"{path}: expected 3 or 4 columns per point, got {data.shape[1]}")


def save_point_cloud(path: str | Path, cloud: PointCloud) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".bin":
        rec = np.zeros((len(cloud), BIN_RECORD_FLOATS), dtype="<f4")
        rec[:, :3] = cloud.points
        if cloud.intensity is not None:
            rec[:, 3] = cloud.intensity
        rec.tofile(path)
        return
    delimiter = "," if path.suffix == ".csv" else " "
    if cloud.intensity is not None:
        data = np.column_stack([cloud.points, cloud.intensity])
    else:
        data = cloud.points
    np.savetxt(path, data, fmt="%.6f", delimiter=delimiter)


def load_split(path: str | Path) -> list[int]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"split manifest not found: {path}")
    ids = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            ids.append(int(line))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: not a frame id: {line!r}") from exc
    return ids


def save_split(path: str | Path, frame_ids: list[int]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{fid}\n" for fid in frame_ids))
