"""Evaluation metrics and probes against analytic oracles."""

import dataclasses
import json

import numpy as np
import pytest
import torch

from textmaskgan.data import (BACKGROUNDS, COLORS, SHAPES, ShapeWorldConfig,
                              generate_shapeworld, ingest_coco_style)
from textmaskgan.evaluate import (ClassifierHandle, EmbedderHandle,
                                  MetricError, controllability_probe,
                                  disentanglement_probe, evaluate_checkpoint,
                                  generate_images, inception_score,
                                  nearest_color, r_precision, train_scorers)
from textmaskgan.train import TrainConfig, build_state


def uniform_classifier(classes):
    return ClassifierHandle(
        classes=classes,
        fn=lambda images: torch.full((images.shape[0], classes), 1.0 / classes))


def tagged_images(n, side=4):
    """Image i stores its own index in pixel (0,0,0)."""
    images = torch.zeros(n, 3, side, side)
    images[:, 0, 0, 0] = torch.arange(n, dtype=torch.float32)
    return images


def indexed_classifier(classes):
    def fn(images):
        idx = images[:, 0, 0, 0].long()
        return torch.eye(classes)[idx]
    return ClassifierHandle(classes=classes, fn=fn)


class TestInceptionScore:
    def test_uniform_classifier_scores_one(self):
        mean, std = inception_score(torch.zeros(16, 3, 4, 4),
                                    uniform_classifier(10), splits=2)
        assert abs(mean - 1.0) <= 1e-6
        assert abs(std) <= 1e-6

    @pytest.mark.parametrize("n", [2, 5, 8])
    def test_distinct_one_hots_score_n(self, n):
        mean, std = inception_score(tagged_images(n), indexed_classifier(n),
                                    splits=1)
        assert abs(mean - n) <= 1e-6 * n
        assert std == 0.0

    def test_two_image_oracle(self):
        """Recompute exp(mean KL) by hand for two soft posteriors."""
        probs = np.array([[0.9, 0.1], [0.1, 0.9]], dtype=np.float64)
        handle = ClassifierHandle(classes=2,
                                  fn=lambda images: torch.tensor(probs))
        mean, _ = inception_score(torch.zeros(2, 3, 4, 4), handle, splits=1)
        marginal = probs.mean(axis=0)
        kl = (probs * np.log(probs / marginal)).sum(axis=1)
        assert abs(mean - float(np.exp(kl.mean()))) <= 1e-9

    def test_bounded_by_class_count(self):
        rng = np.random.default_rng(0)
        raw = rng.standard_normal((40, 7))
        probs = np.exp(raw) / np.exp(raw).sum(axis=1, keepdims=True)
        handle = ClassifierHandle(
            classes=7, fn=lambda images: torch.tensor(probs))
        mean, _ = inception_score(torch.zeros(40, 3, 4, 4), handle, splits=2)
        assert 1.0 - 1e-9 <= mean <= 7.0 + 1e-9

    def test_symmetric_halves_have_zero_std(self):
        images = tagged_images(4)
        images[:, 0, 0, 0] = torch.tensor([0.0, 1.0, 0.0, 1.0])
        mean, std = inception_score(images, indexed_classifier(2), splits=2)
        assert abs(mean - 2.0) <= 1e-6
        assert std <= 1e-9

    def test_probability_validation(self):
        bad_negative = ClassifierHandle(
            classes=2, fn=lambda images: torch.tensor([[1.5, -0.5]] * 4))
        with pytest.raises(MetricError):
            inception_score(torch.zeros(4, 3, 4, 4), bad_negative, splits=1)
        bad_sum = ClassifierHandle(
            classes=2, fn=lambda images: torch.tensor([[0.6, 0.6]] * 4))
        with pytest.raises(MetricError):
            inception_score(torch.zeros(4, 3, 4, 4), bad_sum, splits=1)
        bad_width = ClassifierHandle(
            classes=3, fn=lambda images: torch.tensor([[0.5, 0.5]] * 4))
        with pytest.raises(MetricError):
            inception_score(torch.zeros(4, 3, 4, 4), bad_width, splits=1)

    def test_split_count_validation(self):
        with pytest.raises(MetricError):
            inception_score(torch.zeros(2, 3, 4, 4), uniform_classifier(2),
                            splits=3)
        with pytest.raises(MetricError):
            inception_score(torch.zeros(2, 3, 4, 4), uniform_classifier(2),
                            splits=0)


def one_hot_embedder(n):
    def image_fn(images):
        idx = images[:, 0, 0, 0].long()
        return torch.eye(n)[idx]

    def caption_fn(caption):
        return torch.eye(n)[int(caption.split("-")[1])]

    return EmbedderHandle(dim=n, image_fn=image_fn, caption_fn=caption_fn)


class TestRPrecision:
    def test_oracle_embedder_is_perfect(self):
        n = 30
        captions = [f"cap-{i}" for i in range(n)]
        rate = r_precision(tagged_images(n), captions, one_hot_embedder(n),
                           pool=n)
        assert rate == 100.0

    def test_random_embedder_near_chance(self):
        """With pool 100 a random embedder hits ~1%; allow 3 binomial sigma."""
        n, dim = 300, 16
        rng = np.random.default_rng(7)
        image_vecs = torch.tensor(rng.standard_normal((n, dim)))
        caption_vecs = {f"cap-{i}": torch.tensor(rng.standard_normal(dim))
                        for i in range(n)}
        embedder = EmbedderHandle(
            dim=dim,
            image_fn=lambda images: image_vecs[images[:, 0, 0, 0].long()],
            caption_fn=lambda caption: caption_vecs[caption])
        captions = [f"cap-{i}" for i in range(n)]
        rate = r_precision(tagged_images(n), captions, embedder, pool=100,
                           rng=np.random.default_rng(3))
        sigma = float(np.sqrt(0.01 * 0.99 / n)) * 100
        assert abs(rate - 1.0) <= 3 * sigma

    def test_ties_count_as_misses(self):
        n = 10
        same = torch.ones(4)
        embedder = EmbedderHandle(
            dim=4,
            image_fn=lambda images: same.expand(images.shape[0], 4),
            caption_fn=lambda caption: same)
        rate = r_precision(tagged_images(n), [f"cap-{i}" for i in range(n)],
                           embedder, pool=5)
        assert rate == 0.0

    def test_pool_of_one_has_no_distractors(self):
        n = 5
        rate = r_precision(tagged_images(n), [f"cap-{i}" for i in range(n)],
                           one_hot_embedder(n), pool=1)
        assert rate == 100.0

    def test_pool_larger_than_caption_universe_rejected(self):
        n = 5
        with pytest.raises(MetricError):
            r_precision(tagged_images(n), [f"cap-{i}" for i in range(n)],
                        one_hot_embedder(n), pool=100)

    def test_length_mismatch_rejected(self):
        with pytest.raises(MetricError):
            r_precision(tagged_images(3), ["cap-0"], one_hot_embedder(3))

    def test_zero_vector_similarity_guard(self):
        n = 10
        embedder = EmbedderHandle(
            dim=4,
            image_fn=lambda images: torch.zeros(images.shape[0], 4),
            caption_fn=lambda caption: torch.ones(4))
        rate = r_precision(tagged_images(n), [f"cap-{i}" for i in range(n)],
                           embedder, pool=5)
        assert rate == 0.0


class TestNearestColor:
    palette = {"red": (220, 40, 40), "green": (40, 190, 70),
               "blue": (50, 80, 220)}

    def test_exact_match(self):
        assert nearest_color(np.array([220.0, 40.0, 40.0]),
                             self.palette) == "red"

    def test_nearest_wins(self):
        assert nearest_color(np.array([200.0, 60.0, 50.0]),
                             self.palette) == "red"
        assert nearest_color(np.array([60.0, 170.0, 90.0]),
                             self.palette) == "green"

    def test_tie_breaks_by_sorted_name(self):
        palette = {"b": (0.0, 0.0, 0.0), "a": (2.0, 0.0, 0.0)}
        assert nearest_color(np.array([1.0, 0.0, 0.0]), palette) == "a"


@pytest.fixture(scope="module")
def splits(tmp_path_factory):
    root = tmp_path_factory.mktemp("evalset")
    cfg = ShapeWorldConfig(
        side=32,
        colors={"red": COLORS["red"], "green": COLORS["green"]},
        backgrounds={"white": BACKGROUNDS["white"],
                     "gray": BACKGROUNDS["gray"]},
        shapes=SHAPES, heldout_pairs=(("red", "triangle"),),
        per_cell=3, heldout_per_cell=3, seed=5)
    train_root, heldout_root = generate_shapeworld(cfg, root)
    return (ingest_coco_style(train_root, side=32),
            ingest_coco_style(heldout_root, side=32))


@pytest.fixture(scope="module")
def untrained_state(splits):
    train_samples, _ = splits
    config = TrainConfig(epochs=1, batch_size=4, seed=0, out_dir="unused")
    return build_state(config, train_samples)


class TestGenerateImages:
    def test_stage_shapes_and_determinism(self, splits, untrained_state):
        _, heldout = splits
        captions = [caps[0] for caps in heldout.captions[:4]]
        masks = heldout.masks[:4]
        fakes = generate_images(untrained_state, captions, masks, seed=9)
        assert [f.shape[-1] for f in fakes] == [8, 16, 32]
        assert all(f.shape[0] == 4 for f in fakes)
        again = generate_images(untrained_state, captions, masks, seed=9)
        assert all(torch.equal(a, b) for a, b in zip(fakes, again))
        other = generate_images(untrained_state, captions, masks, seed=10)
        assert not torch.equal(fakes[-1], other[-1])

    def test_modules_left_in_train_mode(self, splits, untrained_state):
        _, heldout = splits
        generate_images(untrained_state, [heldout.captions[0][0]],
                        heldout.masks[:1], seed=0)
        assert untrained_state.generator.training
        assert untrained_state.text_encoder.training


class TestControllabilityProbe:
    def test_counts_and_determinism(self, splits, untrained_state):
        _, heldout = splits
        result = controllability_probe(untrained_state, heldout, seed=1)
        assert result.scored + result.excluded == len(heldout)
        assert 0.0 <= result.rate <= 100.0
        assert result.hits <= result.scored
        again = controllability_probe(untrained_state, heldout, seed=1)
        assert (again.hits, again.scored, again.excluded) == (
            result.hits, result.scored, result.excluded)

    def test_empty_masks_are_excluded(self, splits, untrained_state):
        _, heldout = splits
        doctored = dataclasses.replace(heldout, masks=heldout.masks.clone())
        doctored.masks[0] = 0.0
        result = controllability_probe(untrained_state, doctored, seed=1)
        assert result.excluded >= 1
        assert result.scored + result.excluded == len(heldout)

    def test_missing_palette_rejected(self, splits, untrained_state):
        _, heldout = splits
        bare = dataclasses.replace(heldout, meta={})
        with pytest.raises(MetricError):
            controllability_probe(untrained_state, bare, seed=1)


class TestDisentanglementProbe:
    def test_values_and_determinism(self, splits, untrained_state):
        _, heldout = splits
        caption = heldout.captions[0][0]
        a = disentanglement_probe(untrained_state, caption, heldout.masks[0],
                                  heldout.masks[1], seed=2)
        assert a.background_change >= 0.0
        assert a.foreground_change >= 0.0
        assert a.empty_mask_image.shape == (3, 32, 32)
        b = disentanglement_probe(untrained_state, caption, heldout.masks[0],
                                  heldout.masks[1], seed=2)
        assert a.background_change == b.background_change
        assert a.foreground_change == b.foreground_change

    def test_identical_masks_change_nothing(self, splits, untrained_state):
        _, heldout = splits
        result = disentanglement_probe(untrained_state, heldout.captions[0][0],
                                       heldout.masks[0],
                                       heldout.masks[0].clone(), seed=2)
        assert result.background_change == 0.0
        assert result.foreground_change == 0.0

    def test_degenerate_masks_rejected(self, splits, untrained_state):
        _, heldout = splits
        caption = heldout.captions[0][0]
        zero = torch.zeros_like(heldout.masks[0])
        with pytest.raises(MetricError):
            disentanglement_probe(untrained_state, caption, zero,
                                  zero.clone(), seed=2)
        ones = torch.ones_like(heldout.masks[0])
        with pytest.raises(MetricError):
            disentanglement_probe(untrained_state, caption, ones,
                                  ones.clone(), seed=2)

    def test_mask_shape_mismatch_rejected(self, splits, untrained_state):
        _, heldout = splits
        with pytest.raises(MetricError):
            disentanglement_probe(untrained_state, heldout.captions[0][0],
                                  heldout.masks[0],
                                  torch.zeros(1, 16, 16), seed=2)


class TestTrainScorers:
    def test_deterministic_given_seed(self, splits):
        train_samples, _ = splits
        probe = train_samples.images[:4]
        outputs = []
        for _ in range(2):
            classifier, embedder = train_scorers(train_samples, seed=5,
                                                 epochs=1)
            outputs.append((classifier.fn(probe),
                            embedder.image_fn(probe),
                            embedder.caption_fn(train_samples.captions[0][0])))
        for a, b in zip(outputs[0], outputs[1]):
            assert torch.equal(a, b)

    def test_classifier_emits_valid_probabilities(self, splits):
        train_samples, _ = splits
        classifier, embedder = train_scorers(train_samples, seed=5, epochs=1)
        assert classifier.classes == 2
        probs = classifier.fn(train_samples.images[:6])
        assert probs.shape == (6, 2)
        assert torch.allclose(probs.sum(dim=1), torch.ones(6), atol=1e-5)
        caption_vec = embedder.caption_fn(train_samples.captions[0][0])
        assert caption_vec.shape == (embedder.dim,)

    def test_learns_color_on_real_data(self, splits):
        """Two jittered palette colors are linearly separable; a trained
        scorer should label the training images far above chance.
        """
        train_samples, _ = splits
        classifier, _ = train_scorers(train_samples, seed=5, epochs=4)
        colors = sorted(train_samples.meta["colors"])
        labels = torch.tensor([colors.index(train_samples.attributes[i]["color"])
                               for i in train_samples.ids])
        pred = classifier.fn(train_samples.images).argmax(dim=1)
        accuracy = (pred == labels).float().mean().item()
        assert accuracy >= 0.9


class TestEvaluateCheckpoint:
    def test_report_smoke(self, splits, untrained_state, tmp_path):
        train_samples, heldout = splits
        report = evaluate_checkpoint(untrained_state, train_samples, heldout,
                                     seed=0, splits=2, scorer_epochs=1)
        assert report.is_mean >= 1.0 - 1e-9
        assert 0.0 <= report.r_precision <= 100.0
        assert report.controllability["scored"] > 0
        assert report.config["pool"] <= len(heldout)
        path = report.to_json(tmp_path / "report.json")
        payload = json.loads(path.read_text())
        assert {"is_mean", "r_precision", "controllability",
                "disentanglement", "config"} <= set(payload)
