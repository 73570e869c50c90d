"""Local image enhancement: perception masks, the enhancer network and its loss.

The student's sparse BEV is pushed toward the teacher's dense BEV, but only
inside the region both sensors can perceive: max pooling turns each image
into a perception-area map, and the intersection of the two maps gates the
squared error.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def _as_nchw(img: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Lift (H,W) or (B,H,W) or (B,1,H,W) to (B,1,H,W); return original ndim."""
    nd = img.ndim
    if nd == 2:
        return img[None, None], nd
    if nd == 3:
        return img[:, None], nd
    if nd == 4:
        if img.shape[1] != 1:
            raise ValueError(f"expected single-channel images, got {img.shape[1]} channels")
        return img, nd
    raise ValueError(f"expected (H,W), (B,H,W) or (B,1,H,W), got shape {tuple(img.shape)}")


def _restore(img: torch.Tensor, nd: int) -> torch.Tensor:
    if nd == 2:
        return img[0, 0]
    if nd == 3:
        return img[:, 0]
    return img


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def perception_mask(img: torch.Tensor, kernel_size: int = 3, stride: int = 1, padding: int = 1) -> torch.Tensor:
    """Max-pool an image into its perception-area map.

    The kernel configuration must preserve the spatial size (default 3x3,
    stride 1, padding 1).
    """
    x, nd = _as_nchw(img)
    pooled = F.max_pool2d(x, kernel_size=kernel_size, stride=stride, padding=padding)
    if pooled.shape[-2:] != x.shape[-2:]:
        raise ValueError(
            f"pooling config k={kernel_size} s={stride} p={padding} changes the image size "
            f"{tuple(x.shape[-2:])} -> {tuple(pooled.shape[-2:])}"
        )
    return _restore(pooled, nd)


def overlap_mask(pooled_s: torch.Tensor, pooled_t: torch.Tensor) -> torch.Tensor:
    """Binary intersection of two perception maps: 1 where both are nonzero."""
    _check_same_shape(pooled_s, pooled_t, "overlap_mask")
    return ((pooled_s != 0) & (pooled_t != 0)).to(pooled_s.dtype)


def enhancement_loss(img_t: torch.Tensor, img_e: torch.Tensor, mask_o: torch.Tensor) -> torch.Tensor:
    """Masked squared error between teacher image and enhanced image.

    Sum of (img_t - img_e)^2 over pixels where mask_o != 0, divided by the
    full pixel count H*W (not the mask size). Batched inputs average the
    per-image losses.
    """
    _check_same_shape(img_t, img_e, "enhancement_loss")
    _check_same_shape(img_t, mask_o, "enhancement_loss mask")
    x_t, _ = _as_nchw(img_t)
    x_e, _ = _as_nchw(img_e)
    m, _ = _as_nchw(mask_o)
    gate = (m != 0).to(x_t.dtype)
    per_image = (gate * (x_t - x_e) ** 2).sum(dim=(1, 2, 3)) / float(x_t.shape[-2] * x_t.shape[-1])
    return per_image.mean()


class EnhancerNet(nn.Module):
    """Small shape-preserving encoder-decoder with a skip connection.

    Input and output are single-channel images; a final sigmoid keeps the
    output inside the [0, 1] density encoding. H and W must be divisible
    by 2 (one downsampling stage).
    """

    def __init__(self, base_channels: int = 16):
        super().__init__()
        c = base_channels
        self.enc1 = nn.Sequential(nn.Conv2d(1, c, 3, padding=1), nn.ReLU(inplace=True))
        self.down = nn.Sequential(nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.ReLU(inplace=True))
        self.mid = nn.Sequential(nn.Conv2d(2 * c, 2 * c, 3, padding=1), nn.ReLU(inplace=True))
        self.up = nn.ConvTranspose2d(2 * c, c, 2, stride=2)
        self.fuse = nn.Sequential(nn.Conv2d(2 * c, c, 3, padding=1), nn.ReLU(inplace=True))
        self.head = nn.Conv2d(c, 1, 3, padding=1)
        self.base_channels = c

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, nd = _as_nchw(x)
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"enhancer needs even H and W, got {h}x{w}")
        e1 = self.enc1(x)
        d = self.mid(self.down(e1))
        u = self.up(d)
        out = torch.sigmoid(self.head(self.fuse(torch.cat([u, e1], dim=1))))
        return _restore(out, nd)


def enhance(net: EnhancerNet, img: torch.Tensor) -> torch.Tensor:
    """Run the enhancer on one image or a batch; shape is preserved."""
    return net(img)
