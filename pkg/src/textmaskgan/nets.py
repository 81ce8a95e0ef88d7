"""The staged generator/discriminator pyramid.

Each stage owns a generator block and a discriminator. Image side doubles
per stage (pixel count x4). A stage refines the incoming hidden state:
mask fusion, text conditioning, a residual block, then 2x upsampling; the
refined state is emitted as an image and handed to the next stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn as nn

from .masks import AffineMaskFusion, downsample_mask


class ConfigError(ValueError):
    pass


class InputSizeError(ValueError):
    pass


@dataclass(frozen=True)
class StagePlan:
    """Stage count, per-stage resolutions and channel widths."""

    resolutions: tuple[int, ...]
    gen_widths: tuple[int, ...]
    disc_widths: tuple[int, ...]
    noise_dim: int = 16
    text_dim: int = 32

    def __post_init__(self):
        k = len(self.resolutions)
        if k < 1:
            raise ConfigError("need at least one stage")
        if len(self.gen_widths) != k or len(self.disc_widths) != k:
            raise ConfigError("width lists must match the stage count")
        for lo, hi in zip(self.resolutions, self.resolutions[1:]):
            if hi != 2 * lo:
                raise ConfigError(f"stage side must double: {lo} -> {hi}")
        if self.resolutions[0] < 8 or self.resolutions[0] % 4 != 0:
            raise ConfigError("first stage side must be a multiple of 4, >= 8")

    @property
    def stages(self) -> int:
        return len(self.resolutions)

    @property
    def finest(self) -> int:
        return self.resolutions[-1]


def desk_plan(stages: int = 3) -> StagePlan:
    """CPU-sized default: 8/16/32 with shrinking widths."""
    widths = (64, 32, 16)[:stages]
    return StagePlan(resolutions=tuple(8 * 2 ** i for i in range(stages)),
                     gen_widths=widths, disc_widths=(32,) * stages)


def full_plan() -> StagePlan:
    """Three stages at 64/128/256; config preset only, not CPU-trainable."""
    return StagePlan(resolutions=(64, 128, 256), gen_widths=(128, 64, 32),
                     disc_widths=(64, 64, 64), noise_dim=100, text_dim=256)


PLAN_PRESETS = {"desk": desk_plan, "full": full_plan}


class GLU(nn.Module):
    def forward(self, x):
        c = x.size(1)
        assert c % 2 == 0, "GLU needs an even channel count"
        return x[:, : c // 2] * torch.sigmoid(x[:, c // 2:])


def conv3x3(in_ch: int, out_ch: int) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=1, padding=1)


def up_block(in_ch: int, out_ch: int) -> nn.Sequential:
    """Nearest-neighbour 2x upsample followed by a gated convolution."""
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        conv3x3(in_ch, out_ch * 2),
        nn.InstanceNorm2d(out_ch * 2),
        GLU(),
    )


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            conv3x3(channels, channels * 2),
            nn.InstanceNorm2d(channels * 2),
            GLU(),
            conv3x3(channels, channels),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class ConcatMaskFusion(nn.Module):
    """Ablation fusion: append the mask as an extra feature channel."""

    extra_channels = 1

    def forward(self, h, mask):
        if h.shape[-2:] != mask.shape[-2:]:
            raise InputSizeError("mask and feature resolutions differ")
        return torch.cat([h, mask], dim=1)


class GeneratorStage(nn.Module):
    """Mask fusion -> text concat -> residual -> 2x upsample -> image head.

    The incoming hidden state sits at half this stage's output side. The
    sentence feature is broadcast and concatenated after fusion; word-level
    attention would slot into `text_context` if reintroduced.
    """

    def __init__(self, in_ch: int, out_ch: int, text_dim: int, fusion: str = "acm"):
        super().__init__()
        if fusion == "acm":
            self.fuse = AffineMaskFusion(in_ch)
            fused = in_ch
        elif fusion == "concat":
            self.fuse = ConcatMaskFusion()
            fused = in_ch + ConcatMaskFusion.extra_channels
        else:
            raise ConfigError(f"unknown fusion mode {fusion!r}")
        self.residual = ResidualBlock(fused + text_dim)
        self.upsample = up_block(fused + text_dim, out_ch)
        self.to_image = nn.Sequential(conv3x3(out_ch, 3), nn.Tanh())

    def text_context(self, sentence: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        return sentence[:, :, None, None].expand(-1, -1, h.size(2), h.size(3))

    def forward(self, h, mask, sentence):
        h = self.fuse(h, mask)
        h = torch.cat([h, self.text_context(sentence, h)], dim=1)
        h = self.residual(h)
        h = self.upsample(h)
        return h, self.to_image(h)


class StagedGenerator(nn.Module):
    """Emits one image per stage; each hidden state feeds the next stage."""

    def __init__(self, plan: StagePlan, fusion: str = "acm"):
        super().__init__()
        self.plan = plan
        self.fusion = fusion
        self.base_side = plan.resolutions[0] // 2
        w = plan.gen_widths
        self.base = nn.Sequential(
            nn.Linear(plan.noise_dim + plan.text_dim,
                      w[0] * 2 * self.base_side ** 2),
            GLU(),
        )
        stages = []
        for i in range(plan.stages):
            in_ch = w[0] if i == 0 else w[i - 1]
            stages.append(GeneratorStage(in_ch, w[i], plan.text_dim, fusion))
        self.stages = nn.ModuleList(stages)

    def fusion_grids(self, mask_pyramid: list[torch.Tensor]) -> list[torch.Tensor]:
        """Per-stage mask grids at each stage's *input* resolution."""
        half = downsample_mask(mask_pyramid[0], self.base_side)
        return [half] + list(mask_pyramid[:-1])

    def forward(self, noise, sentence, mask_pyramid):
        if len(mask_pyramid) != self.plan.stages:
            raise ConfigError(
                f"mask pyramid depth {len(mask_pyramid)} != stages {self.plan.stages}")
        for grid, side in zip(mask_pyramid, self.plan.resolutions):
            if grid.shape[-2:] != (side, side):
                raise ConfigError(f"mask grid {tuple(grid.shape[-2:])} != stage side {side}")
        b = noise.size(0)
        h = self.base(torch.cat([noise, sentence], dim=1))
        h = h.view(b, self.plan.gen_widths[0], self.base_side, self.base_side)
        images, hiddens = [], []
        for stage, grid in zip(self.stages, self.fusion_grids(mask_pyramid)):
            h, img = stage(h, grid, sentence)
            hiddens.append(h)
            images.append(img)
        return images, hiddens


class DiscScores(NamedTuple):
    uncond: torch.Tensor
    cond: Optional[torch.Tensor]


def down_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 4, 2, 1),
        nn.LeakyReLU(0.2, inplace=True),
    )


class StageDiscriminator(nn.Module):
    """Scores r x r inputs with an unconditional head and, given a sentence
    feature, a conditional head. Both heads emit probabilities in (0, 1).
    """

    def __init__(self, resolution: int, base_ch: int, text_dim: int):
        super().__init__()
        if resolution < 8 or resolution & (resolution - 1):
            raise ConfigError("discriminator side must be a power of two >= 8")
        self.resolution = resolution
        blocks, ch, side = [], 3, resolution
        out = base_ch
        while side > 4:
            blocks.append(down_block(ch, out))
            ch, side, out = out, side // 2, out * 2
        self.features = nn.Sequential(*blocks)
        self.uncond_head = nn.Sequential(nn.Conv2d(ch, 1, 4), nn.Sigmoid())
        self.cond_joint = nn.Sequential(
            conv3x3(ch + text_dim, ch),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.cond_head = nn.Sequential(nn.Conv2d(ch, 1, 4), nn.Sigmoid())

    def forward(self, images: torch.Tensor, sentence: torch.Tensor | None = None) -> DiscScores:
        if images.shape[-2:] != (self.resolution, self.resolution):
            raise InputSizeError(
                f"expected {self.resolution}x{self.resolution} input, "
                f"got {tuple(images.shape[-2:])}")
        feat = self.features(images)
        uncond = self.uncond_head(feat).view(-1)
        cond = None
        if sentence is not None:
            tiled = sentence[:, :, None, None].expand(-1, -1, feat.size(2), feat.size(3))
            joint = self.cond_joint(torch.cat([feat, tiled], dim=1))
            cond = self.cond_head(joint).view(-1)
        return DiscScores(uncond=uncond, cond=cond)


class ImageTextMatcher(nn.Module):
    """Small joint embedding of images and sentence features (cosine space)."""

    def __init__(self, image_side: int, text_dim: int, embed_dim: int = 32):
        super().__init__()
        blocks, ch, side = [], 3, image_side
        out = 32
        while side > 4:
            blocks.append(down_block(ch, out))
            ch, side, out = out, side // 2, min(out * 2, 64)
        self.encoder = nn.Sequential(*blocks)
        self.image_proj = nn.Linear(ch, embed_dim)
        self.text_proj = nn.Linear(text_dim, embed_dim)

    def embed_images(self, images: torch.Tensor) -> torch.Tensor:
        feat = self.encoder(images).mean(dim=(2, 3))
        return self.image_proj(feat)

    def embed_sentences(self, sentences: torch.Tensor) -> torch.Tensor:
        return self.text_proj(sentences)
