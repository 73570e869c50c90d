"""Backbone features, the distillation transform branch, and global descriptors.

The backbone maps a single-channel BEV image to a CxHxW feature map. For
feature-distribution distillation a conv bottleneck (C -> C/2 -> C) produces
a transformed map that chases the teacher's feature distribution, while the
untransformed map is preserved and summed back in (dual-branch mode).
Descriptors are the flattened, L2-normalized maps.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class DegenerateFeatureError(ValueError):
    """Raised when a feature map has zero norm and cannot be normalized."""


# (out_channels, stride) per conv stage. The desk preset maps 64x64 -> 32x8x8;
# the paper-scale preset reaches 256 channels.
BACKBONE_PRESETS: dict[str, tuple[tuple[int, int], ...]] = {
    "desk": ((16, 2), (32, 2), (32, 2)),
    "paper": ((64, 2), (128, 2), (256, 2), (256, 2)),
}


class Backbone(nn.Module):
    """Plain conv/ReLU feature extractor for single-channel BEV images."""

    def __init__(self, stages: tuple[tuple[int, int], ...] = BACKBONE_PRESETS["desk"]):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = 1
        for k, (out_ch, stride) in enumerate(stages):
            layers.append(nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1))
            # No activation on the output stage: pre-activation features keep
            # the map nonzero (via the bias) even for empty BEV inputs.
            if k < len(stages) - 1:
                layers.append(nn.ReLU(inplace=True))
            in_ch = out_ch
        self.body = nn.Sequential(*layers)
        self.stages = tuple(stages)
        self.out_channels = in_ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 2:
            return self.body(x[None, None])[0]
        if x.ndim == 3:
            return self.body(x[:, None])
        if x.ndim == 4:
            return self.body(x)
        raise ValueError(f"expected (H,W), (B,H,W) or (B,1,H,W) input, got shape {tuple(x.shape)}")


def extract_features(net: Backbone, img: torch.Tensor) -> torch.Tensor:
    return net(img)


class FeatureTransform(nn.Module):
    """Conv bottleneck C -> C/2 -> C (3x3, stride 1, padding 1, ReLU between)."""

    def __init__(self, channels: int):
        super().__init__()
        if channels % 2:
            raise ValueError(f"channel count must be even, got {channels}")
        self.conv1 = nn.Conv2d(channels, channels // 2, 3, padding=1)
        self.conv2 = nn.Conv2d(channels // 2, channels, 3, padding=1)
        self.channels = channels

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        ch = f.shape[0] if f.ndim == 3 else f.shape[1]
        if ch != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {ch}")
        if f.ndim == 3:
            return self.conv2(F.relu(self.conv1(f[None])))[0]
        return self.conv2(F.relu(self.conv1(f)))


def trans_enc(net: FeatureTransform, f_s: torch.Tensor) -> torch.Tensor:
    return net(f_s)


def fdd_enhance(f_s: torch.Tensor, f_s_t: torch.Tensor) -> torch.Tensor:
    """Dual-branch combination: raw student features plus transformed features."""
    if f_s.shape != f_s_t.shape:
        raise ValueError(f"shape mismatch {tuple(f_s.shape)} vs {tuple(f_s_t.shape)}")
    return f_s + f_s_t


def fdd_loss(f_t: torch.Tensor, f_s_t: torch.Tensor, kind: str = "kl") -> torch.Tensor:
    """Distribution distance between teacher map and transformed student map.

    kind="kl": each map is flattened and softmax-normalized per sample, and
    the result is KL(teacher || student). kind="mse": plain mean squared
    error on the raw maps. Batched inputs average per-sample losses.
    """
    if f_t.shape != f_s_t.shape:
        raise ValueError(f"shape mismatch {tuple(f_t.shape)} vs {tuple(f_s_t.shape)}")
    if not (torch.isfinite(f_t).all() and torch.isfinite(f_s_t).all()):
        raise ValueError("non-finite values in feature maps")
    if kind == "mse":
        return F.mse_loss(f_s_t, f_t)
    if kind != "kl":
        raise ValueError(f"unknown fdd loss kind {kind!r}")
    ft = f_t.reshape(1, -1) if f_t.ndim == 3 else f_t.reshape(f_t.shape[0], -1)
    fs = f_s_t.reshape(1, -1) if f_s_t.ndim == 3 else f_s_t.reshape(f_s_t.shape[0], -1)
    log_p_t = F.log_softmax(ft, dim=1)
    log_p_s = F.log_softmax(fs, dim=1)
    kl = (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=1)
    return kl.mean()


def global_descriptor(f: torch.Tensor) -> torch.Tensor:
    """Flatten a feature map and scale it to unit L2 norm.

    Accepts (C,h,w) -> (D,) or (B,C,h,w) -> (B,D). An all-zero map cannot be
    normalized and raises DegenerateFeatureError.
    """
    if f.ndim == 3:
        flat = f.reshape(-1)
        norm = flat.norm()
        if norm == 0:
            raise DegenerateFeatureError("all-zero feature map has no direction")
        return flat / norm
    if f.ndim == 4:
        flat = f.reshape(f.shape[0], -1)
        norms = flat.norm(dim=1, keepdim=True)
        if (norms == 0).any():
            raise DegenerateFeatureError("all-zero feature map has no direction")
        return flat / norms
    raise ValueError(f"expected (C,h,w) or (B,C,h,w), got shape {tuple(f.shape)}")
