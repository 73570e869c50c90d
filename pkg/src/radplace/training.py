"""Teacher pretraining and student distillation training loops.

The teacher learns LiDAR-to-LiDAR retrieval with the triplet loss alone.
Students are trained per tuple (anchor, positive, negatives): the same-
modality student adds enhancement, feature-distribution and relational
response terms against a frozen teacher; the cross-modal student runs both
sensor branches through one backbone and aligns them with the teacher's
descriptors. All randomness derives from the config seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from itertools import chain
from pathlib import Path

import numpy as np
import torch

from .config import Config, ConfigError, PreprocessConfig, derive_seed
from .dataio import load_point_cloud
from .enhancement import EnhancerNet, enhancement_loss, overlap_mask, perception_mask
from .features import Backbone, FeatureTransform, fdd_loss, global_descriptor
from .geometry import GridSpec, crop_to_range, radius_outlier_removal, rasterize_bev
from .losses import LossParts
from .losses import rd_loss_r2l, rd_loss_r2r, triplet_loss, triplet_loss_r2l
from .mining import FrameLog, TrainingTuple, build_pose_index, sample_tuple

CHECKPOINT_NAME = "checkpoint.pt"
METRICS_NAME = "metrics.csv"
CHECKPOINT_FORMAT = 1

MODE_LABELS = {"teacher_l2l": "L2L", "student_r2r": "R2R", "student_r2l": "R2L"}


# Preprocessing ---------------------------------------------------------------

def preprocess_cloud(cloud, modality: str, grid: GridSpec, prep: PreprocessConfig) -> np.ndarray:
    """Crop to the grid range, de-noise radar clouds, and rasterize."""
    cloud = crop_to_range(cloud, grid)
    if modality == "radar" and prep.ror_radius is not None:
        cloud = radius_outlier_removal(cloud, prep.ror_radius, prep.ror_min_neighbors)
    return rasterize_bev(cloud, grid)


def load_bev(path, modality: str, grid: GridSpec, prep: PreprocessConfig) -> torch.Tensor:
    return torch.from_numpy(preprocess_cloud(load_point_cloud(path), modality, grid, prep))


# Model bundle ----------------------------------------------------------------

@dataclass
class ModelBundle:
    """The networks of one trained model plus the routing needed to use them."""

    mode: str
    backbone: Backbone
    enhancer: EnhancerNet | None = None
    transform: FeatureTransform | None = None
    branch: str = "dual"

    def modules(self) -> dict[str, torch.nn.Module]:
        out: dict[str, torch.nn.Module] = {"backbone": self.backbone}
        if self.enhancer is not None:
            out["enhancer"] = self.enhancer
        if self.transform is not None:
            out["transform"] = self.transform
        return out

    def parameters(self):
        return chain.from_iterable(m.parameters() for m in self.modules().values())

    def eval(self) -> "ModelBundle":
        for m in self.modules().values():
            m.eval()
        return self

    def freeze(self) -> "ModelBundle":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def combine_features(self, f: torch.Tensor) -> torch.Tensor:
        """Apply the transform branch when present (dual keeps the raw map too)."""
        if self.transform is None:
            return f
        ft = self.transform(f)
        return f + ft if self.branch == "dual" else ft

    def student_images(self, imgs: torch.Tensor, modality: str) -> torch.Tensor:
        if modality == "radar" and self.enhancer is not None:
            return self.enhancer(imgs)
        return imgs

    def describe(self, imgs: torch.Tensor, modality: str) -> torch.Tensor:
        """Descriptors for a batch of BEV images of the given modality."""
        if self.mode == "teacher_l2l":
            if modality != "lidar":
                raise ValueError("the teacher model describes lidar images only")
            return global_descriptor(self.backbone(imgs))
        if self.mode == "student_r2r":
            if modality != "radar":
                raise ValueError("the same-modality student describes radar images only")
            f = self.backbone(self.student_images(imgs, "radar"))
            return global_descriptor(self.combine_features(f))
        if self.mode == "student_r2l":
            if modality == "radar":
                f = self.backbone(self.student_images(imgs, "radar"))
                return global_descriptor(self.combine_features(f))
            if modality == "lidar":
                return global_descriptor(self.backbone(imgs))
            raise ValueError(f"unknown modality {modality!r}")
        raise ValueError(f"unknown mode {self.mode!r}")

    def feature_shape(self, grid: GridSpec) -> tuple[int, int, int]:
        with torch.no_grad():
            f = self.backbone(torch.zeros(1, 1, grid.height, grid.width))
        return tuple(f.shape[1:])

    def descriptor_dim(self, grid: GridSpec) -> int:
        return int(np.prod(self.feature_shape(grid)))


def save_checkpoint(path, bundle: ModelBundle, config: Config, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arch = {
        "backbone_stages": [list(s) for s in bundle.backbone.stages],
        "enhancer_channels": bundle.enhancer.base_channels if bundle.enhancer else None,
        "transform_channels": bundle.transform.channels if bundle.transform else None,
        "branch": bundle.branch,
    }
    from dataclasses import asdict

    payload = {
        "format": CHECKPOINT_FORMAT,
        "mode": bundle.mode,
        "arch": arch,
        "grid": asdict(config.grid),
        "preprocess": asdict(config.preprocess),
        "descriptor_dim": bundle.descriptor_dim(config.grid),
        "config_hash": config.hash(),
        "train_config": asdict(config.train),
        "state": {name: module.state_dict() for name, module in bundle.modules().items()},
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> tuple[ModelBundle, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    arch = payload["arch"]
    stages = tuple(tuple(s) for s in arch["backbone_stages"])
    bundle = ModelBundle(
        mode=payload["mode"],
        backbone=Backbone(stages),
        enhancer=EnhancerNet(arch["enhancer_channels"]) if arch["enhancer_channels"] else None,
        transform=FeatureTransform(arch["transform_channels"]) if arch["transform_channels"] else None,
        branch=arch.get("branch", "dual"),
    )
    for name, module in bundle.modules().items():
        module.load_state_dict(payload["state"][name])
    bundle.eval()
    return bundle, payload


def checkpoint_grid(payload: dict) -> GridSpec:
    return GridSpec(**payload["grid"])


def checkpoint_preprocess(payload: dict) -> PreprocessConfig:
    return PreprocessConfig(**payload["preprocess"])


# Frame caches ----------------------------------------------------------------

def prepare_bevs(
    log: FrameLog,
    frame_ids,
    modality: str,
    grid: GridSpec,
    prep: PreprocessConfig,
) -> dict[int, torch.Tensor]:
    log.require_paths(modality)
    out = {}
    for fid in frame_ids:
        record = log.by_id[fid]
        path = record.radar_path if modality == "radar" else record.lidar_path
        out[fid] = load_bev(path, modality, grid, prep)
    return out


def teacher_outputs(
    teacher: ModelBundle,
    lidar_bevs: dict[int, torch.Tensor],
    batch_size: int = 32,
) -> dict[int, tuple[torch.Tensor, torch.Tensor]]:
    """Frozen teacher features and descriptors per frame."""
    teacher.eval()
    ids = list(lidar_bevs)
    out = {}
    with torch.no_grad():
        for start in range(0, len(ids), batch_size):
            chunk = ids[start : start + batch_size]
            imgs = torch.stack([lidar_bevs[fid] for fid in chunk])
            feats = teacher.backbone(imgs)
            descs = global_descriptor(feats)
            for k, fid in enumerate(chunk):
                out[fid] = (feats[k], descs[k])
    return out


def make_masks(
    radar_bevs: dict[int, torch.Tensor],
    lidar_bevs: dict[int, torch.Tensor],
    mode: str,
) -> dict[int, torch.Tensor]:
    """Enhancement-target masks: sensor-overlap for local mode, all ones for global."""
    masks = {}
    for fid, radar in radar_bevs.items():
        if mode == "global":
            masks[fid] = torch.ones_like(radar)
        else:
            masks[fid] = overlap_mask(perception_mask(radar), perception_mask(lidar_bevs[fid]))
    return masks


# Step traces -----------------------------------------------------------------

@dataclass
class R2RStepTrace:
    parts: LossParts
    radar_images: torch.Tensor
    enhanced: torch.Tensor | None
    features: torch.Tensor
    transformed: torch.Tensor | None
    combined: torch.Tensor
    descriptors: torch.Tensor
    masks: torch.Tensor | None = None
    lidar_images: torch.Tensor | None = None
    teacher_features: torch.Tensor | None = None
    teacher_descriptors: torch.Tensor | None = None

    def total(self) -> torch.Tensor:
        return self.parts.total()


@dataclass
class R2LStepTrace:
    parts: LossParts
    radar_descriptors: torch.Tensor
    lidar_descriptors: torch.Tensor
    enhanced: torch.Tensor | None = None
    teacher_descriptors: torch.Tensor | None = None
    positive_source: str = "student"

    def total(self) -> torch.Tensor:
        return self.parts.total()


# Trainers --------------------------------------------------------------------

class TeacherTrainer:
    """Triplet-only training of the backbone on lidar BEV images."""

    def __init__(self, config: Config):
        if config.train.mode != "teacher_l2l":
            raise ConfigError(f"TeacherTrainer requires mode=teacher_l2l, got {config.train.mode}")
        self.config = config
        torch.manual_seed(derive_seed(config.seed, "init"))
        self.bundle = ModelBundle(mode="teacher_l2l", backbone=Backbone(config.model.backbone_stages()))
        self.bevs: dict[int, torch.Tensor] = {}

    def prepare(self, log: FrameLog, frame_ids) -> None:
        self.bevs = prepare_bevs(log, frame_ids, "lidar", self.config.grid, self.config.preprocess)

    def parameters(self):
        return list(self.bundle.parameters())

    def step(self, tup: TrainingTuple) -> R2RStepTrace:
        imgs = torch.stack([self.bevs[fid] for fid in tup.all_ids()])
        feats = self.bundle.backbone(imgs)
        descs = global_descriptor(feats)
        n_pos = len(tup.positive_ids)
        negs = descs[1 + n_pos :]
        trip = torch.stack(
            [triplet_loss(descs[0], descs[1 + k], negs, self.config.train.margins.triplet_r2r) for k in range(n_pos)]
        ).mean()
        return R2RStepTrace(
            parts=LossParts(triplet=trip),
            radar_images=imgs,
            enhanced=None,
            features=feats,
            transformed=None,
            combined=feats,
            descriptors=descs,
        )


class StudentR2RTrainer:
    """Same-modality distillation: enhancement, feature-distribution and response terms."""

    def __init__(self, config: Config, teacher: ModelBundle | None):
        cfg = config.train
        if cfg.mode != "student_r2r":
            raise ConfigError(f"StudentR2RTrainer requires mode=student_r2r, got {cfg.mode}")
        if (cfg.use_fdd or cfg.use_rd) and teacher is None:
            raise ConfigError("use_fdd/use_rd need a teacher checkpoint")
        self.config = config
        self.teacher = teacher.eval().freeze() if teacher is not None else None
        torch.manual_seed(derive_seed(config.seed, "init"))
        enhancer = EnhancerNet(config.model.enhancer_channels) if cfg.use_le else None
        backbone = Backbone(config.model.backbone_stages())
        transform = FeatureTransform(backbone.out_channels) if cfg.use_fdd else None
        self.bundle = ModelBundle(
            mode="student_r2r", backbone=backbone, enhancer=enhancer, transform=transform, branch=cfg.branch
        )
        if self.teacher is not None:
            t_dim = self.teacher.descriptor_dim(config.grid)
            s_dim = self.bundle.descriptor_dim(config.grid)
            if t_dim != s_dim:
                raise ConfigError(f"teacher checkpoint incompatible: descriptor dimension {t_dim} != student {s_dim}")
        self.radar_bevs: dict[int, torch.Tensor] = {}
        self.lidar_bevs: dict[int, torch.Tensor] = {}
        self.masks: dict[int, torch.Tensor] = {}
        self.teacher_out: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}

    def prepare(self, log: FrameLog, frame_ids) -> None:
        cfg = self.config.train
        self.radar_bevs = prepare_bevs(log, frame_ids, "radar", self.config.grid, self.config.preprocess)
        if cfg.use_le or cfg.use_fdd or cfg.use_rd:
            self.lidar_bevs = prepare_bevs(log, frame_ids, "lidar", self.config.grid, self.config.preprocess)
        if cfg.use_le:
            self.masks = make_masks(self.radar_bevs, self.lidar_bevs, cfg.enhancement)
        if cfg.use_fdd or cfg.use_rd:
            self.teacher_out = teacher_outputs(self.teacher, self.lidar_bevs)

    def parameters(self):
        return list(self.bundle.parameters())

    def step(self, tup: TrainingTuple) -> R2RStepTrace:
        cfg = self.config.train
        ids = tup.all_ids()
        imgs = torch.stack([self.radar_bevs[fid] for fid in ids])
        enhanced = self.bundle.enhancer(imgs) if cfg.use_le else None
        feats = self.bundle.backbone(enhanced if enhanced is not None else imgs)
        transformed = self.bundle.transform(feats) if cfg.use_fdd else None
        if transformed is not None:
            combined = feats + transformed if cfg.branch == "dual" else transformed
        else:
            combined = feats
        descs = global_descriptor(combined)

        n_pos = len(tup.positive_ids)
        negs = descs[1 + n_pos :]
        trip = torch.stack(
            [triplet_loss(descs[0], descs[1 + k], negs, cfg.margins.triplet_r2r) for k in range(n_pos)]
        ).mean()
        parts = LossParts(triplet=trip)

        masks = lidar = t_feats = t_descs = None
        if cfg.use_le:
            lidar = torch.stack([self.lidar_bevs[fid] for fid in ids])
            masks = torch.stack([self.masks[fid] for fid in ids])
            parts.enhance = enhancement_loss(lidar, enhanced, masks)
        if cfg.use_fdd:
            t_feats = torch.stack([self.teacher_out[fid][0] for fid in ids])
            parts.fdd = fdd_loss(t_feats, transformed, kind=cfg.fdd_loss)
        if cfg.use_rd:
            t_descs = torch.stack([self.teacher_out[fid][1] for fid in ids])
            parts.rd = rd_loss_r2r(t_descs, descs, cfg.margins)

        return R2RStepTrace(
            parts=parts,
            radar_images=imgs,
            enhanced=enhanced,
            features=feats,
            transformed=transformed,
            combined=combined,
            descriptors=descs,
            masks=masks,
            lidar_images=lidar,
            teacher_features=t_feats,
            teacher_descriptors=t_descs,
        )


class StudentR2LTrainer:
    """Cross-modal student: one backbone serves both sensors, radar gets the enhancer."""

    def __init__(self, config: Config, teacher: ModelBundle | None):
        cfg = config.train
        if cfg.mode != "student_r2l":
            raise ConfigError(f"StudentR2LTrainer requires mode=student_r2l, got {cfg.mode}")
        needs_teacher = cfg.use_rd or cfg.use_fdd or cfg.triplet_positive == "teacher"
        if needs_teacher and teacher is None:
            raise ConfigError(
                "a teacher checkpoint is required for use_rd, use_fdd or triplet_positive=teacher"
            )
        self.config = config
        self.teacher = teacher.eval().freeze() if teacher is not None else None
        torch.manual_seed(derive_seed(config.seed, "init"))
        enhancer = EnhancerNet(config.model.enhancer_channels) if cfg.use_le else None
        backbone = Backbone(config.model.backbone_stages())
        transform = FeatureTransform(backbone.out_channels) if cfg.use_fdd else None
        self.bundle = ModelBundle(
            mode="student_r2l", backbone=backbone, enhancer=enhancer, transform=transform, branch=cfg.branch
        )
        if self.teacher is not None:
            t_dim = self.teacher.descriptor_dim(config.grid)
            s_dim = self.bundle.descriptor_dim(config.grid)
            if t_dim != s_dim:
                raise ConfigError(f"teacher checkpoint incompatible: descriptor dimension {t_dim} != student {s_dim}")
        self.radar_bevs: dict[int, torch.Tensor] = {}
        self.lidar_bevs: dict[int, torch.Tensor] = {}
        self.masks: dict[int, torch.Tensor] = {}
        self.teacher_out: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}

    def prepare(self, log: FrameLog, frame_ids) -> None:
        cfg = self.config.train
        self.radar_bevs = prepare_bevs(log, frame_ids, "radar", self.config.grid, self.config.preprocess)
        self.lidar_bevs = prepare_bevs(log, frame_ids, "lidar", self.config.grid, self.config.preprocess)
        if cfg.use_le:
            self.masks = make_masks(self.radar_bevs, self.lidar_bevs, cfg.enhancement)
        if self.teacher is not None:
            self.teacher_out = teacher_outputs(self.teacher, self.lidar_bevs)

    def parameters(self):
        return list(self.bundle.parameters())

    def step(self, tup: TrainingTuple) -> R2LStepTrace:
        cfg = self.config.train
        ids = tup.all_ids()
        radar = torch.stack([self.radar_bevs[fid] for fid in ids])
        lidar = torch.stack([self.lidar_bevs[fid] for fid in ids])
        enhanced = self.bundle.enhancer(radar) if cfg.use_le else None
        f_radar = self.bundle.backbone(enhanced if enhanced is not None else radar)
        f_radar_combined = self.bundle.combine_features(f_radar)
        g_radar = global_descriptor(f_radar_combined)
        g_lidar = global_descriptor(self.bundle.backbone(lidar))

        n_pos = len(tup.positive_ids)
        negs = g_lidar[1 + n_pos :]
        use_teacher_pos = cfg.triplet_positive == "teacher" and self.teacher is not None
        trips = []
        for k in range(n_pos):
            if use_teacher_pos:
                pos = self.teacher_out[ids[1 + k]][1]
                trips.append(triplet_loss_r2l(g_radar[0], pos, negs, cfg.margins.triplet_r2l))
            else:
                trips.append(triplet_loss(g_radar[0], g_lidar[1 + k], negs, cfg.margins.triplet_r2l))
        parts = LossParts(triplet=torch.stack(trips).mean())

        if cfg.use_le:
            masks = torch.stack([self.masks[fid] for fid in ids])
            parts.enhance = enhancement_loss(lidar, enhanced, masks)
        if cfg.use_fdd:  # only reachable through the explicit override
            t_feats = torch.stack([self.teacher_out[fid][0] for fid in ids])
            parts.fdd = fdd_loss(t_feats, self.bundle.transform(f_radar), kind=cfg.fdd_loss)
        t_descs = None
        if cfg.use_rd:
            t_descs = torch.stack([self.teacher_out[fid][1] for fid in ids])
            parts.rd = rd_loss_r2l(g_radar, g_lidar, t_descs, cfg.margins)

        return R2LStepTrace(
            parts=parts,
            radar_descriptors=g_radar,
            lidar_descriptors=g_lidar,
            enhanced=enhanced,
            teacher_descriptors=t_descs,
            positive_source="teacher" if use_teacher_pos else "student",
        )


# Training loop ---------------------------------------------------------------

def fit(trainer, log: FrameLog, train_ids, out_dir) -> Path:
    """Run the epoch loop, write per-epoch metrics, save the checkpoint."""
    config: Config = trainer.config
    cfg = config.train
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_ids = list(train_ids)
    if not train_ids:
        raise ValueError("no training frames")
    trainer.prepare(log, train_ids)
    sub_log = FrameLog([log.by_id[fid] for fid in train_ids])
    index = build_pose_index(sub_log)
    rng = np.random.default_rng(derive_seed(config.seed, "tuples"))
    optimizer = torch.optim.Adam(trainer.parameters(), lr=cfg.lr)

    part_names = ("triplet", "enhance", "fdd", "rd")
    metrics_path = out_dir / METRICS_NAME
    with open(metrics_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "steps", "skipped", "total", *[f"loss_{p}" for p in part_names]])
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(train_ids)
            sums = {p: 0.0 for p in part_names}
            seen = {p: False for p in part_names}
            total_sum, steps, skipped = 0.0, 0, 0
            for anchor_id in order:
                tup = sample_tuple(
                    index,
                    int(anchor_id),
                    rng,
                    pos_radius=cfg.mining.pos_radius,
                    neg_radius=cfg.mining.neg_radius,
                    n_pos=cfg.mining.n_pos,
                    n_neg=cfg.mining.n_neg,
                )
                if tup is None:
                    skipped += 1
                    continue
                optimizer.zero_grad()
                trace = trainer.step(tup)
                total = trace.total()
                total.backward()
                optimizer.step()
                value = float(total.detach())
                if not math.isfinite(value):
                    raise RuntimeError(f"non-finite loss at epoch {epoch}")
                total_sum += value
                steps += 1
                for name, part in trace.parts.present().items():
                    sums[name] += float(part.detach())
                    seen[name] = True
            if steps == 0:
                raise RuntimeError(
                    "no anchor produced a valid tuple; check mining radii against the trajectory"
                )
            writer.writerow(
                [epoch, steps, skipped, f"{total_sum / steps:.6f}"]
                + [f"{sums[p] / steps:.6f}" if seen[p] else "" for p in part_names]
            )
            f.flush()

    return save_checkpoint(out_dir / CHECKPOINT_NAME, trainer.bundle, config)


# Spec-level entry points -----------------------------------------------------

def train_teacher(config: Config, log: FrameLog, train_ids, out_dir) -> Path:
    trainer = TeacherTrainer(config)
    return fit(trainer, log, train_ids, out_dir)


def _load_teacher(teacher_ckpt) -> ModelBundle | None:
    if teacher_ckpt is None:
        return None
    bundle, payload = load_checkpoint(teacher_ckpt)
    if bundle.mode != "teacher_l2l":
        raise ConfigError(f"expected a teacher checkpoint, got mode {bundle.mode!r}")
    return bundle


def train_student_r2r(config: Config, log: FrameLog, train_ids, teacher_ckpt, out_dir) -> Path:
    trainer = StudentR2RTrainer(config, _load_teacher(teacher_ckpt))
    return fit(trainer, log, train_ids, out_dir)


def train_student_r2l(config: Config, log: FrameLog, train_ids, teacher_ckpt, out_dir) -> Path:
    trainer = StudentR2LTrainer(config, _load_teacher(teacher_ckpt))
    return fit(trainer, log, train_ids, out_dir)
