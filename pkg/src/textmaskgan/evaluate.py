"""Evaluation: sample-quality metrics with pluggable scorers, plus the
controllability and disentanglement probes used on the synthetic dataset.

The score networks are handles (plain callables), so tests can substitute
analytic stubs and the shipped desk scorers stay replaceable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import SampleSet, from_model_range, mask_pyramid
from .losses import matching_loss
from .nets import ImageTextMatcher
from .text import TextEncoder, build_vocabulary, CaptionPipeline, LexiconTagger

PROB_TOL = 1e-6


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ClassifierHandle:
    """Image batch (B,3,H,W) -> class probabilities (B,C)."""

    classes: int
    fn: Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class EmbedderHandle:
    """Images and captions mapped into one metric space."""

    dim: int
    image_fn: Callable[[torch.Tensor], torch.Tensor]
    caption_fn: Callable[[str], torch.Tensor]


def _class_probabilities(images: torch.Tensor, classifier: ClassifierHandle,
                         chunk: int = 256) -> np.ndarray:
    parts = []
    with torch.no_grad():
        for lo in range(0, images.shape[0], chunk):
            batch = images[lo:lo + chunk]
            probs = torch.as_tensor(classifier.fn(batch)).double()
            parts.append(probs.cpu().numpy())
    probs = np.concatenate(parts, axis=0)
    if probs.shape[1] != classifier.classes:
        raise MetricError(
            f"classifier emitted {probs.shape[1]} classes, declared {classifier.classes}")
    if (probs < -PROB_TOL).any():
        raise MetricError("negative class probability")
    sums = probs.sum(axis=1)
    if np.abs(sums - 1.0).max() > PROB_TOL:
        raise MetricError("class probabilities do not sum to 1")
    return np.clip(probs, 0.0, None)


def inception_score(images: torch.Tensor, classifier: ClassifierHandle,
                    splits: int = 2) -> tuple[float, float]:
    """exp(mean KL(p(y|x) || p(y))) per contiguous split; mean and stddev."""
    n = images.shape[0]
    if splits < 1:
        raise MetricError("splits must be >= 1")
    if n < splits:
        raise MetricError(f"{n} images cannot fill {splits} splits")
    probs = _class_probabilities(images, classifier)
    scores = []
    for part in np.array_split(probs, splits, axis=0):
        marginal = part.mean(axis=0, keepdims=True)
        ratio = np.divide(part, marginal, out=np.ones_like(part),
                          where=part > 0)
        kl = np.where(part > 0, part * np.log(ratio), 0.0).sum(axis=1)
        scores.append(float(np.exp(kl.mean())))
    return float(np.mean(scores)), float(np.std(scores))


def r_precision(images: torch.Tensor, captions: Sequence[str],
                embedder: EmbedderHandle, pool: int = 100,
                rng: np.random.Generator | None = None) -> float:
    """Fraction (as a percent) of images whose own caption outranks
    pool−1 random mismatched captions under cosine similarity. Ties count
    as misses.
    """
    if images.shape[0] != len(captions):
        raise MetricError("images and captions differ in length")
    if pool < 1:
        raise MetricError("pool must be >= 1")
    rng = rng or np.random.default_rng(0)
    unique = sorted(set(captions))
    if len(unique) < pool:
        raise MetricError(
            f"need at least {pool} distinct captions, have {len(unique)}")
    with torch.no_grad():
        caption_vecs = {c: np.asarray(embedder.caption_fn(c), dtype=np.float64).ravel()
                        for c in unique}
        image_vecs = np.asarray(embedder.image_fn(images), dtype=np.float64)

    def _cos(a: np.ndarray, b: np.ndarray) -> float:
        denom = np.linalg.norm(a) * np.linalg.norm(b)
        return float(a @ b / denom) if denom > 0 else 0.0

    hits = 0
    index_of = {c: i for i, c in enumerate(unique)}
    for row, caption in enumerate(captions):
        others = [i for i in range(len(unique)) if i != index_of[caption]]
        picked = rng.choice(len(others), size=pool - 1, replace=False)
        own = _cos(image_vecs[row], caption_vecs[caption])
        best_other = max((_cos(image_vecs[row], caption_vecs[unique[others[j]]])
                          for j in picked), default=float("-inf"))
        if own > best_other:
            hits += 1
    return 100.0 * hits / len(captions)


def generate_images(state, captions: Sequence[str], masks: torch.Tensor,
                    seed: int = 0) -> list[torch.Tensor]:
    """Per-stage images for a caption/mask batch, seeded independently of
    the training stream.
    """
    from .train import encode_captions  # local import breaks the cycle

    rng = torch.Generator()
    rng.manual_seed(seed)
    noise = torch.randn(len(captions), state.plan.noise_dim, generator=rng)
    state.generator.eval()
    state.text_encoder.eval()
    try:
        with torch.no_grad():
            sentence = encode_captions(state, captions)
            grids = mask_pyramid(masks, state.plan.resolutions)
            fakes, _ = state.generator(noise, sentence, grids)
    finally:
        state.generator.train()
        state.text_encoder.train()
    return fakes


@dataclass
class ControllabilityResult:
    hits: int
    scored: int
    excluded: int
    per_color: dict[str, float] = field(default_factory=dict)

    @property
    def rate(self) -> float:
        return 100.0 * self.hits / self.scored if self.scored else 0.0


def nearest_color(mean_rgb: np.ndarray, palette: dict[str, Sequence[float]]) -> str:
    names = sorted(palette)
    dists = [float(np.sum((mean_rgb - np.asarray(palette[n], dtype=np.float64)) ** 2))
             for n in names]
    return names[int(np.argmin(dists))]


def controllability_probe(state, heldout: SampleSet, seed: int = 0,
                          batch: int = 64) -> ControllabilityResult:
    """Generates from held-out captions and checks the dominant foreground
    color against the caption's ground-truth color word. Samples with an
    empty mask at the finest stage are excluded and counted separately.
    """
    palette = heldout.meta.get("colors")
    if not palette:
        raise MetricError("dataset meta lacks a color palette")
    if not heldout.attributes:
        raise MetricError("dataset lacks attribute records")
    hits, scored, excluded = 0, 0, 0
    color_hits: dict[str, list[int]] = {}
    for lo in range(0, len(heldout), batch):
        ids = heldout.ids[lo:lo + batch]
        captions = [heldout.captions[i][0] for i in range(lo, min(lo + batch, len(heldout)))]
        masks = heldout.masks[lo:lo + batch]
        fakes = generate_images(state, captions, masks, seed=seed + lo)
        finest = from_model_range(fakes[-1].numpy())
        mask_np = masks.numpy() > 0.5
        for row, sample_id in enumerate(ids):
            fg = mask_np[row, 0]
            if not fg.any():
                excluded += 1
                continue
            pixels = finest[row][:, fg].astype(np.float64)
            winner = nearest_color(pixels.mean(axis=1), palette)
            truth = heldout.attributes[sample_id]["color"]
            hit = int(winner == truth)
            hits += hit
            scored += 1
            color_hits.setdefault(truth, []).append(hit)
    per_color = {c: 100.0 * sum(v) / len(v) for c, v in sorted(color_hits.items())}
    return ControllabilityResult(hits=hits, scored=scored, excluded=excluded,
                                 per_color=per_color)


@dataclass
class DisentanglementResult:
    background_change: float
    foreground_change: float
    empty_mask_image: torch.Tensor


def disentanglement_probe(state, caption: str, mask_a: torch.Tensor,
                          mask_b: torch.Tensor, seed: int = 0) -> DisentanglementResult:
    """Same noise and caption under an empty mask, mask A, and mask B.
    Background change = mean |A − B| over pixels outside both masks;
    foreground change = the same inside the mask union.
    """
    if mask_a.shape != mask_b.shape:
        raise MetricError("masks differ in shape")
    masks = torch.stack([torch.zeros_like(mask_a), mask_a, mask_b])
    rng = torch.Generator()
    rng.manual_seed(seed)
    noise_row = torch.randn(1, state.plan.noise_dim, generator=rng)
    from .train import encode_captions

    state.generator.eval()
    state.text_encoder.eval()
    try:
        with torch.no_grad():
            sentence = encode_captions(state, [caption]).expand(3, -1)
            grids = mask_pyramid(masks, state.plan.resolutions)
            fakes, _ = state.generator(noise_row.expand(3, -1), sentence, grids)
    finally:
        state.generator.train()
        state.text_encoder.train()
    finest = fakes[-1]
    union = ((mask_a + mask_b) > 0.5)[0]
    background = ~union
    if not union.any() or not background.any():
        raise MetricError("mask union must leave both regions non-empty")
    diff = (finest[1] - finest[2]).abs()
    bg_change = float(diff[:, background].mean())
    fg_change = float(diff[:, union].mean())
    return DisentanglementResult(background_change=bg_change,
                                 foreground_change=fg_change,
                                 empty_mask_image=finest[0])


@dataclass
class EvalReport:
    is_mean: float
    is_std: float
    r_precision: float
    r_precision_std: float
    controllability: dict
    disentanglement: dict
    config: dict

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True),
                        encoding="utf-8")
        return path


class _ColorClassifier(torch.nn.Module):
    def __init__(self, classes: int):
        super().__init__()
        self.net = torch.nn.Sequential(
            torch.nn.Conv2d(3, 16, 4, 2, 1), torch.nn.LeakyReLU(0.2),
            torch.nn.Conv2d(16, 32, 4, 2, 1), torch.nn.LeakyReLU(0.2),
            torch.nn.AdaptiveAvgPool2d(1), torch.nn.Flatten(),
            torch.nn.Linear(32, classes))

    def forward(self, x):
        return self.net(x)


def train_scorers(samples: SampleSet, seed: int = 0, epochs: int = 4,
                  batch_size: int = 32, text_dim: int = 32,
                  use_pos: bool = True) -> tuple[ClassifierHandle, EmbedderHandle]:
    """Fits the desk classifier (foreground color) and the joint
    image/caption embedder on real data only. Deterministic given the seed.
    """
    colors = sorted(samples.meta.get("colors", {}))
    if not colors:
        raise MetricError("dataset meta lacks a color palette")
    labels = torch.tensor(
        [colors.index(samples.attributes[i]["color"]) for i in samples.ids])

    torch.manual_seed(seed)
    classifier = _ColorClassifier(len(colors))
    tagger = LexiconTagger()
    vocab = build_vocabulary([c for caps in samples.captions for c in caps],
                             tagger, use_pos=use_pos)
    pipeline = CaptionPipeline(tagger=tagger, vocab=vocab, use_pos=use_pos)
    encoder = TextEncoder(len(vocab), feature_dim=text_dim)
    matcher = ImageTextMatcher(samples.side, text_dim)

    opt_c = torch.optim.Adam(classifier.parameters(), lr=1e-3)
    opt_m = torch.optim.Adam(list(matcher.parameters()) + list(encoder.parameters()),
                             lr=1e-3)
    rng = np.random.Generator(np.random.PCG64(seed))
    n = len(samples)
    for _ in range(epochs):
        order = rng.permutation(n)
        pick = rng.integers(0, [len(samples.captions[i]) for i in order])
        for lo in range(0, n, batch_size):
            idx = torch.from_numpy(np.ascontiguousarray(order[lo:lo + batch_size])).long()
            images = samples.images[idx]
            loss_c = torch.nn.functional.cross_entropy(classifier(images),
                                                       labels[idx])
            opt_c.zero_grad(set_to_none=True)
            loss_c.backward()
            opt_c.step()
            if len(idx) < 2:
                continue
            caps = [samples.captions[int(i)][int(c)]
                    for i, c in zip(order[lo:lo + batch_size], pick[lo:lo + batch_size])]
            sent = _encode_with(pipeline, encoder, caps)
            loss_m = matching_loss(matcher, images, sent)
            opt_m.zero_grad(set_to_none=True)
            loss_m.backward()
            opt_m.step()
    classifier.eval()
    encoder.eval()
    matcher.eval()

    def classify(images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return torch.softmax(classifier(images), dim=1)

    def embed_images(images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return matcher.embed_images(images)

    def embed_caption(caption: str) -> torch.Tensor:
        with torch.no_grad():
            sent = _encode_with(pipeline, encoder, [caption])
            return matcher.embed_sentences(sent)[0]

    embed_dim = matcher.text_proj.out_features
    return (ClassifierHandle(classes=len(colors), fn=classify),
            EmbedderHandle(dim=embed_dim, image_fn=embed_images,
                           caption_fn=embed_caption))


def _encode_with(pipeline: CaptionPipeline, encoder: TextEncoder,
                 captions: Sequence[str]) -> torch.Tensor:
    prepared = [pipeline.prepare(c) for c in captions]
    max_len = max(len(p.ids) for p in prepared)
    ids = torch.zeros(len(prepared), max_len, dtype=torch.long)
    lengths = torch.tensor([len(p.ids) for p in prepared], dtype=torch.long)
    for row, p in enumerate(prepared):
        ids[row, :len(p.ids)] = torch.tensor(p.ids, dtype=torch.long)
    _, sentence = encoder(ids, lengths)
    return sentence


def evaluate_checkpoint(state, train_samples: SampleSet, heldout: SampleSet,
                        seed: int = 0, splits: int = 2, pool: int = 100,
                        scorer_epochs: int = 4) -> EvalReport:
    """Full desk report: IS and R-precision over images generated for the
    held-out captions, plus both probes.
    """
    classifier, embedder = train_scorers(train_samples, seed=seed,
                                         epochs=scorer_epochs)
    captions = [caps[0] for caps in heldout.captions]
    fakes = generate_images(state, captions, heldout.masks, seed=seed)
    finest = fakes[-1]
    is_mean, is_std = inception_score(finest, classifier, splits=splits)
    effective_pool = min(pool, len(set(captions)))
    rng = np.random.Generator(np.random.PCG64(seed))
    rp = r_precision(finest, captions, embedder, pool=effective_pool, rng=rng)
    rp_std = float(np.sqrt(max(rp / 100 * (1 - rp / 100), 0.0) / len(captions)) * 100)
    control = controllability_probe(state, heldout, seed=seed)
    half = len(heldout) // 2
    dis = disentanglement_probe(state, captions[0], heldout.masks[0],
                                heldout.masks[half], seed=seed)
    return EvalReport(
        is_mean=is_mean, is_std=is_std, r_precision=rp, r_precision_std=rp_std,
        controllability={"rate": control.rate, "hits": control.hits,
                         "scored": control.scored, "excluded": control.excluded,
                         "per_color": control.per_color},
        disentanglement={"background_change": dis.background_change,
                         "foreground_change": dis.foreground_change},
        config={"seed": seed, "splits": splits, "pool": effective_pool,
                "plan": state.config.plan, "use_pos": state.config.use_pos,
                "use_acm": state.config.use_acm,
                "use_refined": state.config.use_refined,
                "use_structure_loss": state.config.use_structure_loss})


ABLATION_ROWS: tuple[tuple[str, dict], ...] = (
    ("full", {}),
    ("w/o POS", {"use_pos": False}),
    ("w/ Concate.", {"use_acm": False}),
    ("w/o Refined", {"use_refined": False}),
    ("w/o SL", {"use_structure_loss": False}),
)


def _row_slug(label: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in label.lower()).strip("_")


def run_ablation(train_samples: SampleSet, heldout: SampleSet, base_config,
                 out_dir, seed: int = 0,
                 rows: Sequence[tuple[str, dict]] = ABLATION_ROWS) -> list[dict]:
    """Trains every flag set from the same seed and scores controllability
    on the held-out split. Returns one row dict per flag set.
    """
    import dataclasses

    from .train import fit, load_checkpoint

    out_dir = Path(out_dir)
    results = []
    for label, flags in rows:
        config = dataclasses.replace(base_config,
                                     out_dir=str(out_dir / _row_slug(label)),
                                     **flags)
        checkpoint = fit(config, train_samples)
        state = load_checkpoint(checkpoint)
        probe = controllability_probe(state, heldout, seed=seed)
        results.append({"label": label, "flags": flags,
                        "hit_rate": probe.rate, "hits": probe.hits,
                        "scored": probe.scored, "excluded": probe.excluded,
                        "checkpoint": str(checkpoint)})
    return results


def format_ablation_table(rows: Sequence[dict]) -> str:
    width = max(len(r["label"]) for r in rows)
    lines = [f"{'model':<{width}}  controllability"]
    for r in rows:
        lines.append(f"{r['label']:<{width}}  {r['hit_rate']:6.2f}%")
    return "\n".join(lines)
