"""The eight-row ablation grid over distillation module combinations.

Rows a0..a3 train the same-modality student, b0..b3 the cross-modal one,
adding enhancement, feature-distribution distillation and response
distillation one at a time. Row b2 deliberately enables the combination
that the cross-modal config normally rejects, via the explicit override.
"""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path

from .config import Config
from .evaluation import evaluate_bundle
from .mining import FrameLog
from .training import StudentR2LTrainer, StudentR2RTrainer, _load_teacher, fit, load_checkpoint

ABLATION_ROWS: tuple[dict, ...] = (
    {"row": "a0", "mode": "student_r2r", "enhancement": "raw", "use_fdd": False, "use_rd": False, "teacher": False},
    {"row": "a1", "mode": "student_r2r", "enhancement": "local", "use_fdd": False, "use_rd": False, "teacher": False},
    {"row": "a2", "mode": "student_r2r", "enhancement": "local", "use_fdd": True, "use_rd": False, "teacher": True},
    {"row": "a3", "mode": "student_r2r", "enhancement": "local", "use_fdd": True, "use_rd": True, "teacher": True},
    {"row": "b0", "mode": "student_r2l", "enhancement": "raw", "use_fdd": False, "use_rd": False, "teacher": False},
    {"row": "b1", "mode": "student_r2l", "enhancement": "local", "use_fdd": False, "use_rd": False, "teacher": True},
    {"row": "b2", "mode": "student_r2l", "enhancement": "local", "use_fdd": True, "use_rd": False, "teacher": True},
    {"row": "b3", "mode": "student_r2l", "enhancement": "local", "use_fdd": False, "use_rd": True, "teacher": True},
)


def row_config(base: Config, row: dict) -> Config:
    train = replace(
        base.train,
        mode=row["mode"],
        enhancement=row["enhancement"],
        use_fdd=row["use_fdd"],
        use_rd=row["use_rd"],
        # Without a teacher the cross-modal triplet can only use the
        # student's own lidar descriptor as positive.
        triplet_positive="teacher" if row["teacher"] else "student",
        allow_fdd_r2l=row["mode"] == "student_r2l" and row["use_fdd"],
    )
    return replace(base, train=train)


def run_ablation(
    base_config: Config,
    log: FrameLog,
    train_ids,
    db_ids,
    query_ids,
    teacher_ckpt,
    out_dir,
    progress=None,
) -> list[dict]:
    """Train and evaluate every grid row; write a combined report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for row in ABLATION_ROWS:
        config = row_config(base_config, row)
        teacher = _load_teacher(teacher_ckpt) if row["teacher"] else None
        if config.train.mode == "student_r2r":
            trainer = StudentR2RTrainer(config, teacher)
        else:
            trainer = StudentR2LTrainer(config, teacher)
        ckpt = fit(trainer, log, train_ids, out_dir / row["row"])
        bundle, payload = load_checkpoint(ckpt)
        label, report = evaluate_bundle(
            bundle, log, db_ids, query_ids, config.grid, config.preprocess
        )
        entry = {
            "row": row["row"],
            "mode": label,
            "enhancement": row["enhancement"],
            "use_fdd": row["use_fdd"],
            "use_rd": row["use_rd"],
            **{f"recall@{n}": report.recall_at[n] for n in sorted(report.recall_at)},
        }
        results.append(entry)
        if progress is not None:
            progress(entry)
    write_ablation_report(out_dir, results)
    return results


def write_ablation_report(out_dir, results: list[dict]) -> Path:
    out_dir = Path(out_dir)
    recall_cols = [k for k in results[0] if k.startswith("recall@")]
    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["row", "mode", "enhancement", "use_fdd", "use_rd", *recall_cols])
        for r in results:
            writer.writerow(
                [r["row"], r["mode"], r["enhancement"], int(r["use_fdd"]), int(r["use_rd"])]
                + [f"{r[c]:.6f}" for c in recall_cols]
            )
    lines = [
        f"{'row':<5} {'mode':<5} {'enhance':<8} {'fdd':<4} {'rd':<4} "
        + " ".join(f"{c.replace('recall@', 'R@'):>6}" for c in recall_cols)
    ]
    for r in results:
        lines.append(
            f"{r['row']:<5} {r['mode']:<5} {r['enhancement']:<8} "
            f"{'yes' if r['use_fdd'] else 'no':<4} {'yes' if r['use_rd'] else 'no':<4} "
            + " ".join(f"{100.0 * r[c]:6.1f}" for c in recall_cols)
        )
    (out_dir / "ablation.txt").write_text("\n".join(lines) + "\n")
    return csv_path
