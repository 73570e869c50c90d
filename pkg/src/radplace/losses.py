"""Triplet, relational-distillation and total losses.

All descriptors are unit-norm vectors; all distances are Euclidean. Hinge
margins absorb small discrepancies instead of forcing exact imitation: the
relational term is hinged as a whole, and the cross-modal alignment term
hinges each of its three descriptor distances.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class Margins:
    rd_r2r: float = 0.01
    rd_r2l: float = 0.01
    triplet_r2r: float = 0.3
    triplet_r2l: float = 0.3

    def __post_init__(self):
        for name in ("rd_r2r", "rd_r2l", "triplet_r2r", "triplet_r2l"):
            if getattr(self, name) < 0:
                raise ValueError(f"margin {name} must be non-negative")


def _as_matrix(descs) -> torch.Tensor:
    """Stack a list of descriptors, or pass through an (N, D) tensor."""
    if isinstance(descs, torch.Tensor):
        return descs if descs.ndim == 2 else descs[None]
    return torch.stack(list(descs))


def triplet_loss(anchor: torch.Tensor, positive: torch.Tensor, negatives, margin: float) -> torch.Tensor:
    """Mean over negatives of max{d(a,p) - d(a,n) + margin, 0}."""
    negs = _as_matrix(negatives)
    if negs.shape[0] == 0:
        raise ValueError("triplet loss needs at least one negative")
    d_ap = torch.norm(anchor - positive)
    d_an = torch.norm(anchor[None] - negs, dim=1)
    return torch.clamp(d_ap - d_an + margin, min=0.0).mean()


def triplet_loss_r2l(anchor_s: torch.Tensor, positive_t: torch.Tensor, negatives_s, margin: float) -> torch.Tensor:
    """Same hinge as triplet_loss, with the positive taken from the teacher."""
    return triplet_loss(anchor_s, positive_t, negatives_s, margin)


def relational_distill_loss(teacher_descs, student_descs) -> torch.Tensor:
    """MSE between teacher and student pairwise Euclidean distance sets.

    Both lists must hold >= 2 corresponding descriptors; all unordered pairs
    contribute.
    """
    t = _as_matrix(teacher_descs)
    s = _as_matrix(student_descs)
    if t.shape[0] != s.shape[0]:
        raise ValueError(f"list length mismatch: {t.shape[0]} vs {s.shape[0]}")
    if t.shape[0] < 2:
        raise ValueError("relational loss needs at least 2 descriptors")
    r_t = torch.pdist(t)
    r_s = torch.pdist(s)
    return ((r_t - r_s) ** 2).mean()


def rd_loss_r2r(teacher_descs, student_descs, margins: Margins) -> torch.Tensor:
    """Relational distillation hinged at the configured margin."""
    return torch.clamp(relational_distill_loss(teacher_descs, student_descs) - margins.rd_r2r, min=0.0)


def rd_loss_r2l(
    g_s_radar: torch.Tensor,
    g_s_lidar: torch.Tensor,
    g_t: torch.Tensor,
    margins: Margins,
) -> torch.Tensor:
    """Three hinged alignment distances: radar-to-teacher, lidar-to-teacher, lidar-to-radar.

    Accepts single descriptors (D,) or batches (B, D); batches average the
    per-sample sums.
    """
    r = _as_matrix(g_s_radar)
    l = _as_matrix(g_s_lidar)
    t = _as_matrix(g_t)
    if not (r.shape == l.shape == t.shape):
        raise ValueError(f"shape mismatch: {tuple(r.shape)}, {tuple(l.shape)}, {tuple(t.shape)}")
    m = margins.rd_r2l
    term = (
        torch.clamp(torch.norm(r - t, dim=1) - m, min=0.0)
        + torch.clamp(torch.norm(l - t, dim=1) - m, min=0.0)
        + torch.clamp(torch.norm(l - r, dim=1) - m, min=0.0)
    )
    return term.mean()


@dataclass
class LossParts:
    """Component losses of one training step; None means the term is disabled."""

    triplet: torch.Tensor | None = None
    enhance: torch.Tensor | None = None
    fdd: torch.Tensor | None = None
    rd: torch.Tensor | None = None

    def present(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in vars(self).items() if v is not None}

    def total(self) -> torch.Tensor:
        parts = list(self.present().values())
        if not parts:
            raise ValueError("no loss components enabled")
        total = parts[0]
        for p in parts[1:]:
            total = total + p
        return total


def total_loss_r2r(parts: LossParts) -> torch.Tensor:
    """Unit-weight sum of the enabled components (triplet, enhance, fdd, rd)."""
    return parts.total()


def total_loss_r2l(parts: LossParts) -> torch.Tensor:
    """Unit-weight sum for cross-modal training; the fdd term must be absent."""
    if parts.fdd is not None:
        raise ValueError("feature-distribution distillation is not part of the cross-modal total loss")
    return parts.total()
