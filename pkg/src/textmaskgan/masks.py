"""Segmentation masks: loading, pyramid construction, and affine fusion.

A mask is a binary grid (1 = foreground). Coarser pyramid levels are built
by max-pooling so that thin foreground regions survive downsampling. The
affine fusion module turns the mask into per-position, per-channel weights
and biases that modulate a hidden feature map elementwise.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

FOREGROUND_THRESHOLD = 127  # 8-bit mask pixels above this are foreground


class MaskError(ValueError):
    pass


def load_mask(path: str | Path, side: int | None = None) -> torch.Tensor:
    """Read an 8-bit single-channel mask file into a binary (1, H, W) tensor."""
    img = Image.open(path).convert("L")
    if side is not None and img.size != (side, side):
        img = img.resize((side, side), Image.NEAREST)
    grid = np.asarray(img, dtype=np.uint8) > FOREGROUND_THRESHOLD
    return torch.from_numpy(grid.astype(np.float32)).unsqueeze(0)


def binarize(mask: torch.Tensor) -> torch.Tensor:
    return (mask > 0.5).to(mask.dtype)


def validate_binary(mask: torch.Tensor) -> None:
    if not torch.all((mask == 0) | (mask == 1)):
        raise MaskError("mask values must be exactly 0 or 1")


def downsample_mask(mask: torch.Tensor, side: int) -> torch.Tensor:
    """Max-pool a (..., H, W) binary mask down to side x side."""
    h = mask.shape[-1]
    if h % side != 0:
        raise MaskError(f"cannot pool {h}x{h} mask to {side}x{side}")
    if h == side:
        return mask
    flat = mask.reshape(-1, 1, h, h)
    pooled = F.max_pool2d(flat, kernel_size=h // side)
    return pooled.reshape(*mask.shape[:-2], side, side)


def build_mask_pyramid(mask: torch.Tensor, resolutions: list[int]) -> list[torch.Tensor]:
    """One grid per resolution, coarsest first, derived from the finest mask.

    ``resolutions`` must increase strictly, end at the mask's own side, and
    form a divisor chain (each side divides the next).
    """
    validate_binary(mask)
    if not resolutions:
        raise MaskError("no resolutions given")
    side = mask.shape[-1]
    if mask.shape[-2] != side:
        raise MaskError("mask must be square")
    if resolutions[-1] != side:
        raise MaskError(f"finest resolution {resolutions[-1]} != mask side {side}")
    for lo, hi in zip(resolutions, resolutions[1:]):
        if hi <= lo:
            raise MaskError("resolutions must increase strictly")
        if hi % lo != 0:
            raise MaskError(f"{lo} does not divide {hi}")
    return [downsample_mask(mask, r) for r in resolutions]


def affine_modulate(h: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Elementwise h * weight + bias; all three shapes must broadcast."""
    return h * weight + bias


class AffineMaskFusion(nn.Module):
    """Maps the mask to per-channel weights/biases and modulates features.

    Both branches are two stacked 3x3 convolutions with a nonlinearity in
    between. Final layers start at zero so fusion begins as the identity:
    weight = 1 + residual, bias = residual.
    """

    def __init__(self, channels: int, hidden: int = 16):
        super().__init__()
        self.channels = channels
        self.weight_net = nn.Sequential(
            nn.Conv2d(1, hidden, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(hidden, channels, 3, padding=1),
        )
        self.bias_net = nn.Sequential(
            nn.Conv2d(1, hidden, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(hidden, channels, 3, padding=1),
        )
        nn.init.zeros_(self.weight_net[-1].weight)
        nn.init.zeros_(self.weight_net[-1].bias)
        nn.init.zeros_(self.bias_net[-1].weight)
        nn.init.zeros_(self.bias_net[-1].bias)

    def weights_and_biases(self, mask: torch.Tensor):
        """mask: (B, 1, H, W) -> weight and bias maps shaped (B, C, H, W)."""
        weight = 1.0 + self.weight_net(mask)
        bias = self.bias_net(mask)
        return weight, bias

    def forward(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if h.shape[-2:] != mask.shape[-2:]:
            raise MaskError(
                f"feature map {tuple(h.shape[-2:])} vs mask {tuple(mask.shape[-2:])}")
        weight, bias = self.weights_and_biases(mask)
        return affine_modulate(h, weight, bias)
