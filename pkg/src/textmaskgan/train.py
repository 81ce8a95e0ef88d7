"""Alternating training loop over the stage pyramid.

Each step updates every discriminator (base + patch + structure terms,
generator outputs detached), then the matching network on real pairs,
then all generator stages jointly (base + patch + match terms). All
randomness flows through one torch.Generator held in TrainState so a
fixed seed reproduces the loss sequence exactly and checkpoints resume
mid-stream.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import SampleSet, epoch_plan, image_pyramid, mask_pyramid
from .losses import (LossLine, LossLogger, LossWeights, StageLossReport,
                     base_d_loss, base_g_loss, make_composites, matching_loss,
                     refined_d_loss, refined_g_loss, structure_g_loss,
                     structure_loss, total_losses)
from .nets import (ImageTextMatcher, PLAN_PRESETS, StagedGenerator,
                   StageDiscriminator, StagePlan)
from .text import (CaptionPipeline, LexiconTagger, TextEncoder, Vocabulary,
                   build_vocabulary)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "textmaskgan-checkpoint-v1"


class ConfigError(ValueError):
    pass


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 16
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_patch: float = 1.0
    lambda_struct: float = 1.0
    lambda_match: float = 1.0
    seed: int = 0
    plan: str = "desk"
    use_pos: bool = True
    use_acm: bool = True
    use_refined: bool = True
    use_structure_loss: bool = True
    structure_loss_in_g: bool = False
    max_caption_len: int = 16
    checkpoint_interval: int = 0
    out_dir: str = "runs/desk"
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.plan not in PLAN_PRESETS:
            raise ConfigError(f"unknown plan preset {self.plan!r}")

    def weights(self) -> LossWeights:
        return LossWeights(patch=self.lambda_patch, struct=self.lambda_struct,
                           match=self.lambda_match)

    # term gating: a disabled flag and a zero weight must take the same
    # code path (same rng draws) so the two spellings are bit-identical
    @property
    def patch_terms_active(self) -> bool:
        return self.use_refined and self.lambda_patch != 0.0

    @property
    def structure_terms_active(self) -> bool:
        return self.use_structure_loss and self.lambda_struct != 0.0


def _coerce(name: str, raw: str, target_type) -> object:
    if target_type is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"bad boolean for {name}: {raw!r}")
    try:
        return target_type(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def read_config_file(path) -> dict:
    """Flat `key=value` lines; '#' starts a comment."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    types = {f.name: type(getattr(TrainConfig(), f.name)) for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value, types[key])
    return values


def make_config(file_path=None, overrides: dict | None = None) -> TrainConfig:
    """File values first, explicit overrides win."""
    values = read_config_file(file_path) if file_path else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return TrainConfig(**values)


@dataclass
class TrainState:
    config: TrainConfig
    plan: StagePlan
    vocab: Vocabulary
    pipeline: CaptionPipeline
    text_encoder: TextEncoder
    generator: StagedGenerator
    discriminators: torch.nn.ModuleList
    matcher: ImageTextMatcher
    opt_g: torch.optim.Adam
    opt_ds: list[torch.optim.Adam]
    opt_m: torch.optim.Adam
    rng: torch.Generator
    epoch: int = 0
    step: int = 0
    batch_in_epoch: int = 0


def build_state(config: TrainConfig, samples: SampleSet) -> TrainState:
    plan = PLAN_PRESETS[config.plan]()
    if samples.side != plan.finest:
        raise TrainError(
            f"dataset side {samples.side} != finest stage {plan.finest}")
    tagger = LexiconTagger()
    all_captions = [c for caps in samples.captions for c in caps]
    vocab = build_vocabulary(all_captions, tagger, use_pos=config.use_pos)
    pipeline = CaptionPipeline(tagger=tagger, vocab=vocab, use_pos=config.use_pos,
                               max_len=config.max_caption_len)
    return _assemble_state(config, plan, vocab, pipeline)


def _assemble_state(config: TrainConfig, plan: StagePlan, vocab: Vocabulary,
                    pipeline: CaptionPipeline) -> TrainState:
    # module init consumes the global torch stream; seed it for repeatability
    torch.manual_seed(config.seed)
    fusion = "acm" if config.use_acm else "concat"
    text_encoder = TextEncoder(len(vocab), feature_dim=plan.text_dim)
    generator = StagedGenerator(plan, fusion=fusion)
    discriminators = torch.nn.ModuleList([
        StageDiscriminator(r, w, plan.text_dim)
        for r, w in zip(plan.resolutions, plan.disc_widths)])
    matcher = ImageTextMatcher(plan.finest, plan.text_dim)

    betas = (config.beta1, config.beta2)
    g_params = list(generator.parameters()) + list(text_encoder.parameters())
    opt_g = torch.optim.Adam(g_params, lr=config.lr, betas=betas)
    opt_ds = [torch.optim.Adam(d.parameters(), lr=config.lr, betas=betas)
              for d in discriminators]
    opt_m = torch.optim.Adam(matcher.parameters(), lr=config.lr, betas=betas)

    rng = torch.Generator()
    rng.manual_seed(config.seed)
    return TrainState(config=config, plan=plan, vocab=vocab, pipeline=pipeline,
                      text_encoder=text_encoder, generator=generator,
                      discriminators=discriminators, matcher=matcher,
                      opt_g=opt_g, opt_ds=opt_ds, opt_m=opt_m, rng=rng)


@dataclass
class Batch:
    images: torch.Tensor
    masks: torch.Tensor
    captions: list[str]
    real_pyramid: list[torch.Tensor]
    mask_pyramid: list[torch.Tensor]


def prepare_batch(state: TrainState, samples: SampleSet,
                  sample_idx: np.ndarray, caption_idx: np.ndarray) -> Batch:
    idx = torch.from_numpy(np.ascontiguousarray(sample_idx)).long()
    images = samples.images[idx]
    masks = samples.masks[idx]
    captions = [samples.captions[int(i)][int(c)]
                for i, c in zip(sample_idx, caption_idx)]
    return Batch(images=images, masks=masks, captions=captions,
                 real_pyramid=image_pyramid(images, state.plan.resolutions),
                 mask_pyramid=mask_pyramid(masks, state.plan.resolutions))


def encode_captions(state: TrainState, captions: Sequence[str]) -> torch.Tensor:
    prepared = [state.pipeline.prepare(c) for c in captions]
    max_len = max(len(p.ids) for p in prepared)
    ids = torch.zeros(len(prepared), max_len, dtype=torch.long)
    lengths = torch.tensor([len(p.ids) for p in prepared], dtype=torch.long)
    for row, p in enumerate(prepared):
        ids[row, :len(p.ids)] = torch.tensor(p.ids, dtype=torch.long)
    _, sentence = state.text_encoder(ids, lengths)
    return sentence


def discriminator_losses(state: TrainState, batch: Batch,
                         fakes: Sequence[torch.Tensor],
                         sentence: torch.Tensor) -> list[StageLossReport]:
    """Per-stage discriminator-side terms; draws patches from state.rng."""
    config = state.config
    mismatched = sentence.roll(1, dims=0) if sentence.size(0) > 1 else None
    reports = []
    for i, disc in enumerate(state.discriminators):
        base = base_d_loss(disc, batch.real_pyramid[i], fakes[i],
                           sentence, mismatched)
        patch = None
        if config.patch_terms_active:
            patch = refined_d_loss(i, batch.real_pyramid, fakes, disc, state.rng)
        struct = None
        if config.structure_terms_active:
            pair = make_composites(batch.real_pyramid[i], fakes[i].detach(),
                                   batch.mask_pyramid[i], stage=i)
            struct = structure_loss(disc, pair)
        reports.append(StageLossReport(stage=i, base_d=base,
                                       base_g=torch.zeros(()), patch_d=patch,
                                       struct=struct))
    return reports


def generator_losses(state: TrainState, batch: Batch,
                     fakes: Sequence[torch.Tensor],
                     sentence: torch.Tensor) -> list[StageLossReport]:
    """Per-stage generator-side terms; the match term rides the finest stage."""
    config = state.config
    reports = []
    last = len(fakes) - 1
    for i, disc in enumerate(state.discriminators):
        base = base_g_loss(disc, fakes[i], sentence)
        patch = None
        if config.patch_terms_active and i > 0:
            patch = refined_g_loss(i, fakes[i], list(state.discriminators[:i]),
                                   state.rng)
        struct = None
        if (config.structure_loss_in_g and config.structure_terms_active):
            pair = make_composites(batch.real_pyramid[i], fakes[i],
                                   batch.mask_pyramid[i], stage=i)
            struct = structure_g_loss(disc, pair)
        match = None
        if i == last and config.lambda_match != 0.0:
            match = matching_loss(state.matcher, fakes[i], sentence)
        report = StageLossReport(stage=i, base_d=torch.zeros(()), base_g=base,
                                 patch_g=patch, text_match=match)
        if struct is not None:
            # opt-in term; the g total only sums base/patch/match slots, so
            # fold the weighted value into base_g here
            report.base_g = report.base_g + config.lambda_struct * struct
        reports.append(report)
    return reports


def train_step(state: TrainState, batch: Batch) -> list[LossLine]:
    """One alternating update; returns loggable scalar lines."""
    config = state.config
    weights = config.weights()
    batch_size = batch.images.size(0)

    noise = torch.randn(batch_size, state.plan.noise_dim, generator=state.rng)
    sentence = encode_captions(state, batch.captions)
    fakes, _ = state.generator(noise, sentence, batch.mask_pyramid)

    # discriminators: generator outputs and sentence detached
    d_reports = discriminator_losses(state, batch, [f.detach() for f in fakes],
                                     sentence.detach())
    totals_d, _ = total_losses(d_reports, weights)
    for opt, total in zip(state.opt_ds, totals_d):
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()

    # matching network: real pairs only, text encoder frozen for this update
    match_real = matching_loss(state.matcher, batch.images, sentence.detach())
    if match_real.requires_grad:
        state.opt_m.zero_grad(set_to_none=True)
        match_real.backward()
        state.opt_m.step()

    # generators: one joint update through the whole pyramid
    g_reports = generator_losses(state, batch, fakes, sentence)
    _, totals_g = total_losses(g_reports, weights)
    state.opt_g.zero_grad(set_to_none=True)
    torch.stack(totals_g).sum().backward()
    state.opt_g.step()

    def _scalar(t: torch.Tensor) -> float:
        return float(t.detach())

    lines = []
    for rep, total in zip(d_reports, totals_d):
        lines.append(LossLine(state.step, state.epoch, "base_d",
                              _scalar(rep.base_d), stage=rep.stage))
        if rep.patch_d is not None:
            lines.append(LossLine(state.step, state.epoch, "patch_d",
                                  _scalar(rep.patch_d), weight=weights.patch,
                                  stage=rep.stage))
        if rep.struct is not None:
            lines.append(LossLine(state.step, state.epoch, "struct",
                                  _scalar(rep.struct), weight=weights.struct,
                                  stage=rep.stage))
        lines.append(LossLine(state.step, state.epoch, "total_d",
                              _scalar(total), stage=rep.stage))
    lines.append(LossLine(state.step, state.epoch, "match_real",
                          _scalar(match_real)))
    for rep, total in zip(g_reports, totals_g):
        lines.append(LossLine(state.step, state.epoch, "base_g",
                              _scalar(rep.base_g), stage=rep.stage))
        if rep.patch_g is not None:
            lines.append(LossLine(state.step, state.epoch, "patch_g",
                                  _scalar(rep.patch_g), weight=weights.patch,
                                  stage=rep.stage))
        if rep.text_match is not None:
            lines.append(LossLine(state.step, state.epoch, "text_match",
                                  _scalar(rep.text_match), weight=weights.match,
                                  stage=rep.stage))
        lines.append(LossLine(state.step, state.epoch, "total_g",
                              _scalar(total), stage=rep.stage))
    state.step += 1
    return lines


def _flatten_parameters(state: TrainState) -> dict[str, torch.Tensor]:
    out = {}
    named = {"text_encoder": state.text_encoder, "generator": state.generator,
             "matcher": state.matcher}
    for name, module in named.items():
        for key, value in module.state_dict().items():
            out[f"{name}/{key}"] = value
    for i, disc in enumerate(state.discriminators):
        for key, value in disc.state_dict().items():
            out[f"discriminators/{i}/{key}"] = value
    return out


def _unflatten_parameters(flat: dict) -> dict[str, dict]:
    nested: dict[str, dict] = {}
    for path, tensor in flat.items():
        head, _, rest = path.partition("/")
        if head == "discriminators":
            idx, _, rest = rest.partition("/")
            nested.setdefault(f"discriminators/{idx}", {})[rest] = tensor
        else:
            nested.setdefault(head, {})[rest] = tensor
    return nested


def save_checkpoint(state: TrainState, path) -> Path:
    """Atomic write: parameters keyed by module/stage/parameter paths plus
    plan, vocabulary, optimizer and rng state, and progress counters.
    """
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": dataclasses.asdict(state.config),
        "plan": dataclasses.asdict(state.plan),
        "vocab": state.vocab.to_list(),
        "parameters": _flatten_parameters(state),
        "optimizers": {
            "generator": state.opt_g.state_dict(),
            "matcher": state.opt_m.state_dict(),
            **{f"discriminator_{i}": opt.state_dict()
               for i, opt in enumerate(state.opt_ds)},
        },
        "counters": {"epoch": state.epoch, "step": state.step,
                     "batch_in_epoch": state.batch_in_epoch},
        "rng": state.rng.get_state(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except OSError:
        tmp.unlink(missing_ok=True)
        raise
    return path


def load_checkpoint(path) -> TrainState:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise TrainError(f"unrecognized checkpoint format in {path}")
    config = TrainConfig(**payload["config"])
    plan = StagePlan(**{k: tuple(v) if isinstance(v, list) else v
                        for k, v in payload["plan"].items()})
    vocab = Vocabulary(payload["vocab"])
    pipeline = CaptionPipeline(tagger=LexiconTagger(), vocab=vocab,
                               use_pos=config.use_pos,
                               max_len=config.max_caption_len)
    state = _assemble_state(config, plan, vocab, pipeline)
    nested = _unflatten_parameters(payload["parameters"])
    state.text_encoder.load_state_dict(nested["text_encoder"])
    state.generator.load_state_dict(nested["generator"])
    state.matcher.load_state_dict(nested["matcher"])
    for i, disc in enumerate(state.discriminators):
        disc.load_state_dict(nested[f"discriminators/{i}"])
    opts = payload["optimizers"]
    state.opt_g.load_state_dict(opts["generator"])
    state.opt_m.load_state_dict(opts["matcher"])
    for i, opt in enumerate(state.opt_ds):
        opt.load_state_dict(opts[f"discriminator_{i}"])
    state.rng.set_state(payload["rng"])
    counters = payload["counters"]
    state.epoch = counters["epoch"]
    state.step = counters["step"]
    state.batch_in_epoch = counters["batch_in_epoch"]
    return state


def fit(config: TrainConfig, samples: SampleSet,
        resume_from=None) -> Path:
    """Runs the full loop; returns the final checkpoint path."""
    if len(samples) == 0:
        raise TrainError("dataset is empty")
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        # the epoch target may be extended on resume; everything else is
        # structural and must come from the checkpoint
        if config.epochs != state.config.epochs:
            state.config = dataclasses.replace(state.config,
                                               epochs=config.epochs)
        if state.config != config:
            log.warning("resume config differs from checkpoint; checkpoint wins")
    else:
        state = build_state(config, samples)
    out_dir = Path(state.config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    final_path = out_dir / "checkpoint.pt"
    caption_counts = [len(c) for c in samples.captions]

    with LossLogger(out_dir / "losses.jsonl") as logger:
        for epoch in range(state.epoch, state.config.epochs):
            plan = epoch_plan(len(samples), caption_counts,
                              state.config.batch_size, state.config.seed, epoch)
            start = state.batch_in_epoch if epoch == state.epoch else 0
            for b in range(start, plan.batches):
                sample_idx, caption_idx = plan.batch(b)
                batch = prepare_batch(state, samples, sample_idx, caption_idx)
                for line in train_step(state, batch):
                    logger.log(line)
                state.batch_in_epoch = b + 1
                interval = state.config.checkpoint_interval
                if interval and state.step % interval == 0:
                    save_checkpoint(state, out_dir / "checkpoint.pt")
            state.epoch = epoch + 1
            state.batch_in_epoch = 0
            logger.flush()
            log.info("epoch %d/%d done (%d steps)", state.epoch,
                     state.config.epochs, state.step)
    return save_checkpoint(state, final_path)
