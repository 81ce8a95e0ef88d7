"""Adversarial loss algebra for the stage pyramid.

Three families on top of the usual conditional/unconditional terms:

* cross-stage patch losses: discriminator i also scores random crops taken
  from every higher-stage image (fake crops detached); generator stage i
  is additionally scored by every lower-stage discriminator on random
  crops of its own output (non-detached),
* a structure loss on mask composites (fake foreground + real background
  and the reverse), both treated as fakes by the unconditional head,
* a small contrastive image-sentence matching term.

All sampling goes through an explicit torch.Generator; nothing touches
global random state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import IO, Optional, Sequence

import torch

EPS = 1e-8


class LossError(RuntimeError):
    pass


class PatchError(ValueError):
    pass


def _log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x.clamp_min(EPS))


def ensure_finite(name: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise LossError(f"non-finite value in loss term {name!r}")
    return value


@dataclass(frozen=True)
class PatchSpec:
    side: int
    origin: tuple[int, int]
    detach: bool
    source_stage: Optional[int] = None
    target_stage: Optional[int] = None


def sample_patch(
    image: torch.Tensor,
    target_side: int,
    rng: torch.Generator,
    detach: bool,
    source_stage: int | None = None,
    target_stage: int | None = None,
) -> tuple[torch.Tensor, PatchSpec]:
    """Uniform-random square crop from the last two axes of `image`.

    One origin per call; a batched input shares the crop position.
    """
    h, w = image.shape[-2:]
    if h != w:
        raise PatchError(f"expected a square image, got {h}x{w}")
    if target_side > h:
        raise PatchError(f"patch side {target_side} exceeds image side {h}")
    origin = torch.randint(0, h - target_side + 1, (2,), generator=rng)
    top, left = int(origin[0]), int(origin[1])
    patch = image[..., top:top + target_side, left:left + target_side]
    if detach:
        patch = patch.detach()
    spec = PatchSpec(side=target_side, origin=(top, left), detach=detach,
                     source_stage=source_stage, target_stage=target_stage)
    return patch, spec


def refined_d_loss(
    stage: int,
    real_pyramid: Sequence[torch.Tensor],
    fake_pyramid: Sequence[torch.Tensor],
    disc,
    rng: torch.Generator,
) -> torch.Tensor:
    """Patch loss for discriminator `stage` (0-based) over all finer stages.

    For each k > stage, one real and one fake crop at this discriminator's
    input side; fake crops are detached so no gradient reaches the
    generator. The last stage has no finer stages and returns zero.
    """
    ref = real_pyramid[stage]
    total = torch.zeros((), dtype=ref.dtype, device=ref.device)
    for k in range(stage + 1, len(real_pyramid)):
        real_patch, _ = sample_patch(real_pyramid[k], disc.resolution, rng,
                                     detach=True, source_stage=k, target_stage=stage)
        fake_patch, _ = sample_patch(fake_pyramid[k], disc.resolution, rng,
                                     detach=True, source_stage=k, target_stage=stage)
        total = total - _log(disc(real_patch).uncond).mean() \
                      - _log(1 - disc(fake_patch).uncond).mean()
    return total


def refined_g_loss(
    stage: int,
    fake_image: torch.Tensor,
    lower_stage_discs: Sequence,
    rng: torch.Generator,
) -> torch.Tensor:
    """Patch loss for generator `stage` (0-based) under all coarser stages.

    One non-detached crop of the stage output per lower discriminator,
    scored by that discriminator. Undefined for the first stage.
    """
    if stage < 1:
        raise ValueError("the first stage has no coarser discriminators")
    if len(lower_stage_discs) != stage:
        raise ValueError(
            f"expected {stage} lower-stage discriminators, got {len(lower_stage_discs)}")
    total = torch.zeros((), dtype=fake_image.dtype, device=fake_image.device)
    for k, disc in enumerate(lower_stage_discs):
        patch, _ = sample_patch(fake_image, disc.resolution, rng,
                                detach=False, source_stage=stage, target_stage=k)
        total = total - _log(disc(patch).uncond).mean()
    return total


@dataclass(frozen=True)
class CompositePair:
    """x1 = fake foreground on real background; x2 the reverse."""

    x1: torch.Tensor
    x2: torch.Tensor
    stage: int = 0


def make_composites(real: torch.Tensor, fake: torch.Tensor,
                    mask: torch.Tensor, stage: int = 0) -> CompositePair:
    """Cut-and-paste mixes. Pass a detached fake for discriminator updates."""
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} != fake {tuple(fake.shape)}")
    if mask.shape[-2:] != real.shape[-2:]:
        raise ValueError(
            f"mask {tuple(mask.shape[-2:])} != image {tuple(real.shape[-2:])}")
    x1 = fake * mask + real * (1 - mask)
    x2 = real * mask + fake * (1 - mask)
    return CompositePair(x1=x1, x2=x2, stage=stage)


def structure_loss(disc, pair: CompositePair) -> torch.Tensor:
    """Both composites should be flagged fake by the unconditional head."""
    return -(_log(1 - disc(pair.x1).uncond).mean()
             + _log(1 - disc(pair.x2).uncond).mean())


def structure_g_loss(disc, pair: CompositePair) -> torch.Tensor:
    """Opt-in generator-side mirror: reward composites the head accepts."""
    return -(_log(disc(pair.x1).uncond).mean()
             + _log(disc(pair.x2).uncond).mean())


def base_d_loss(
    disc,
    real: torch.Tensor,
    fake: torch.Tensor,
    sentence: torch.Tensor | None = None,
    mismatched: torch.Tensor | None = None,
) -> torch.Tensor:
    """Log-likelihood discriminator term over both heads; fake detached
    inside. With a sentence the conditional head sees matched real/fake
    pairs, plus mismatched (real image, other sentence) negatives when given.
    """
    real_scores = disc(real, sentence)
    fake_scores = disc(fake.detach(), sentence)
    loss = -(_log(real_scores.uncond).mean() + _log(1 - fake_scores.uncond).mean())
    if sentence is not None:
        loss = loss - _log(real_scores.cond).mean() - _log(1 - fake_scores.cond).mean()
        if mismatched is not None:
            wrong = disc(real, mismatched)
            loss = loss - _log(1 - wrong.cond).mean()
    return loss


def base_g_loss(disc, fake: torch.Tensor,
                sentence: torch.Tensor | None = None) -> torch.Tensor:
    """Generator term: the discriminator should accept the fake on both heads."""
    scores = disc(fake, sentence)
    loss = -_log(scores.uncond).mean()
    if sentence is not None:
        loss = loss - _log(scores.cond).mean()
    return loss


def base_adversarial_losses(
    disc,
    real: torch.Tensor,
    fake: torch.Tensor,
    sentence: torch.Tensor | None = None,
    mismatched: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Both base terms against the same discriminator state."""
    return (base_d_loss(disc, real, fake, sentence, mismatched),
            base_g_loss(disc, fake, sentence))


def matching_loss(matcher, images: torch.Tensor, sentences: torch.Tensor,
                  temperature: float = 10.0) -> torch.Tensor:
    """Symmetric contrastive loss over in-batch image/sentence pairs."""
    if images.size(0) != sentences.size(0):
        raise ValueError("batch sizes differ")
    if images.size(0) < 2:
        return torch.zeros((), dtype=images.dtype, device=images.device)
    img = torch.nn.functional.normalize(matcher.embed_images(images), dim=1)
    txt = torch.nn.functional.normalize(matcher.embed_sentences(sentences), dim=1)
    logits = img @ txt.t() * temperature
    target = torch.arange(images.size(0), device=images.device)
    return (torch.nn.functional.cross_entropy(logits, target)
            + torch.nn.functional.cross_entropy(logits.t(), target)) / 2


@dataclass
class StageLossReport:
    """Per-stage terms; a None term was skipped and contributes nothing."""

    stage: int
    base_d: torch.Tensor
    base_g: torch.Tensor
    patch_d: Optional[torch.Tensor] = None
    patch_g: Optional[torch.Tensor] = None
    struct: Optional[torch.Tensor] = None
    text_match: Optional[torch.Tensor] = None


@dataclass(frozen=True)
class LossWeights:
    patch: float = 1.0
    struct: float = 1.0
    match: float = 1.0


def total_losses(
    reports: Sequence[StageLossReport],
    weights: LossWeights = LossWeights(),
) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """Weighted per-stage totals; raises LossError naming a non-finite term."""
    totals_d, totals_g = [], []
    for rep in reports:
        label = f"stage {rep.stage}"
        d = ensure_finite(f"base_d/{label}", rep.base_d)
        g = ensure_finite(f"base_g/{label}", rep.base_g)
        if rep.patch_d is not None:
            d = d + weights.patch * ensure_finite(f"patch_d/{label}", rep.patch_d)
        if rep.struct is not None:
            d = d + weights.struct * ensure_finite(f"struct/{label}", rep.struct)
        if rep.patch_g is not None:
            g = g + weights.patch * ensure_finite(f"patch_g/{label}", rep.patch_g)
        if rep.text_match is not None:
            g = g + weights.match * ensure_finite(f"text_match/{label}", rep.text_match)
        totals_d.append(d)
        totals_g.append(g)
    return totals_d, totals_g


@dataclass(frozen=True)
class LossLine:
    """One serialized scalar: a (step, stage, term) observation."""

    step: int
    epoch: int
    term: str
    value: float
    weight: float = 1.0
    stage: Optional[int] = None


class LossLogger:
    """Appends one JSON object per line; safe to reopen across resumes."""

    def __init__(self, path):
        self.path = path
        self._fh: IO[str] | None = open(path, "a", encoding="utf-8")

    def log(self, line: LossLine) -> None:
        assert self._fh is not None, "logger is closed"
        self._fh.write(json.dumps(asdict(line), sort_keys=True) + "\n")

    def flush(self) -> None:
        if self._fh is not None:
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_loss_log(path) -> list[LossLine]:
    lines = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            raw = raw.strip()
            if raw:
                lines.append(LossLine(**json.loads(raw)))
    return lines
