"""Descriptor databases from checkpoints and Recall@N evaluation."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch

from .config import PreprocessConfig
from .dataio import load_split
from .geometry import GridSpec
from .mining import FrameLog
from .retrieval import DEFAULT_RECALL_NS, DEFAULT_THRESHOLD_M, DescriptorDB, RecallReport, recall_at_n
from .training import ModelBundle, checkpoint_grid, checkpoint_preprocess, load_checkpoint, prepare_bevs

# mode -> (query modality, database modality, report label)
EVAL_ROUTING = {
    "teacher_l2l": ("lidar", "lidar", "L2L"),
    "student_r2r": ("radar", "radar", "R2R"),
    "student_r2l": ("radar", "lidar", "R2L"),
}


def describe_frames(
    bundle: ModelBundle,
    log: FrameLog,
    frame_ids,
    modality: str,
    grid: GridSpec,
    prep: PreprocessConfig,
    batch_size: int = 32,
) -> np.ndarray:
    """Unit-norm descriptors for the given frames, in frame_ids order."""
    bundle.eval()
    bevs = prepare_bevs(log, frame_ids, modality, grid, prep)
    chunks = []
    with torch.no_grad():
        ids = list(frame_ids)
        for start in range(0, len(ids), batch_size):
            imgs = torch.stack([bevs[fid] for fid in ids[start : start + batch_size]])
            chunks.append(bundle.describe(imgs, modality).numpy())
    return np.vstack(chunks)


def build_db(
    bundle: ModelBundle,
    log: FrameLog,
    frame_ids,
    modality: str,
    grid: GridSpec,
    prep: PreprocessConfig,
) -> DescriptorDB:
    descs = describe_frames(bundle, log, frame_ids, modality, grid, prep)
    db = DescriptorDB(dim=descs.shape[1], modality=modality)
    for fid, desc in zip(frame_ids, descs):
        db.add(fid, desc, log.pose(fid))
    return db


def evaluate_bundle(
    bundle: ModelBundle,
    log: FrameLog,
    db_ids,
    query_ids,
    grid: GridSpec,
    prep: PreprocessConfig,
    ns=DEFAULT_RECALL_NS,
    threshold_m: float = DEFAULT_THRESHOLD_M,
    allow_overlap: bool = False,
) -> tuple[str, RecallReport]:
    query_mod, db_mod, label = EVAL_ROUTING[bundle.mode]
    if not allow_overlap:
        shared = set(db_ids) & set(query_ids)
        if shared:
            raise ValueError(f"query and database splits overlap on {len(shared)} frames (first: {min(shared)})")
    db = build_db(bundle, log, db_ids, db_mod, grid, prep)
    q_descs = describe_frames(bundle, log, query_ids, query_mod, grid, prep)
    queries = [(q_descs[k], log.pose(fid)) for k, fid in enumerate(query_ids)]
    return label, recall_at_n(db, queries, ns=ns, threshold_m=threshold_m)


def evaluate_checkpoint(
    ckpt_path,
    dataset_dir,
    db_split: str = "database",
    query_split: str = "query",
    ns=DEFAULT_RECALL_NS,
    threshold_m: float = DEFAULT_THRESHOLD_M,
    allow_overlap: bool = False,
) -> tuple[str, RecallReport]:
    """Evaluate a checkpoint on a dataset directory's splits."""
    bundle, payload = load_checkpoint(ckpt_path)
    dataset_dir = Path(dataset_dir)
    log = FrameLog.load(dataset_dir)
    db_ids = load_split(dataset_dir / "splits" / f"{db_split}.txt")
    query_ids = load_split(dataset_dir / "splits" / f"{query_split}.txt")
    return evaluate_bundle(
        bundle,
        log,
        db_ids,
        query_ids,
        checkpoint_grid(payload),
        checkpoint_preprocess(payload),
        ns=ns,
        threshold_m=threshold_m,
        allow_overlap=allow_overlap,
    )


def write_recall_report(out_dir, label: str, report: RecallReport) -> Path:
    """Machine-readable CSV next to the plain-text summary table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "recall.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["mode", "n", "recall", "queries", "threshold_m"])
        for n in sorted(report.recall_at):
            writer.writerow([label, n, f"{report.recall_at[n]:.6f}", report.n_queries, report.threshold_m])
    (out_dir / "recall.txt").write_text(report.format_table(label) + "\n")
    return csv_path
