"""Synthetic dataset generation, ingestion and epoch scheduling."""

import json
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from textmaskgan.data import (BACKGROUNDS, COLORS, HELDOUT_PAIRS, SHAPES,
                              DatasetError, ShapeWorldConfig, batch_stream,
                              epoch_plan, from_model_range, generate_shapeworld,
                              image_pyramid, ingest_coco_style,
                              load_mask_array, mask_pyramid, to_model_range)


def small_config(**kwargs):
    base = dict(side=16,
                colors={"red": COLORS["red"], "green": COLORS["green"]},
                backgrounds={"white": BACKGROUNDS["white"],
                             "gray": BACKGROUNDS["gray"]},
                shapes=SHAPES, heldout_pairs=(("red", "triangle"),),
                per_cell=2, heldout_per_cell=1, seed=7)
    base.update(kwargs)
    return ShapeWorldConfig(**base)


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestGeneration:
    def test_sample_counting(self, tmp_path):
        """shapes x colors x backgrounds x per_cell with no held-out pairs:
        3 * 2 * 2 * 10 = 120 train samples.
        """
        cfg = small_config(per_cell=10, heldout_pairs=())
        train_root, heldout_root = generate_shapeworld(cfg, tmp_path)
        rows = (train_root / "captions.jsonl").read_text().strip().splitlines()
        assert len(rows) == 120
        assert len(list((train_root / "images").glob("*.png"))) == 120

    def test_heldout_pairs_never_in_train(self, tmp_path):
        cfg = small_config()
        train_root, heldout_root = generate_shapeworld(cfg, tmp_path)
        train_attrs = [json.loads(line) for line in
                       (train_root / "attributes.jsonl").read_text().splitlines()]
        held_attrs = [json.loads(line) for line in
                      (heldout_root / "attributes.jsonl").read_text().splitlines()]
        assert all((a["color"], a["shape"]) != ("red", "triangle")
                   for a in train_attrs)
        assert held_attrs and all((a["color"], a["shape"]) == ("red", "triangle")
                                  for a in held_attrs)
        # one cell per background at heldout_per_cell=1
        assert len(held_attrs) == 2

    def test_full_grid_heldout_rejected(self, tmp_path):
        cfg = small_config(colors={"red": COLORS["red"]},
                           shapes=("triangle",),
                           heldout_pairs=(("red", "triangle"),))
        with pytest.raises(DatasetError):
            generate_shapeworld(cfg, tmp_path)

    def test_bad_heldout_pair_rejected(self):
        with pytest.raises(DatasetError):
            small_config(heldout_pairs=(("purple", "circle"),))

    def test_regeneration_is_byte_identical(self, tmp_path):
        cfg = small_config()
        generate_shapeworld(cfg, tmp_path / "a")
        generate_shapeworld(cfg, tmp_path / "b")
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_different_seed_differs(self, tmp_path):
        generate_shapeworld(small_config(seed=7), tmp_path / "a")
        generate_shapeworld(small_config(seed=8), tmp_path / "b")
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert set(a) == set(b)
        assert any(a[k] != b[k] for k in a if k.startswith("train/images"))

    def test_mask_matches_shape_silhouette(self, tmp_path):
        """Foreground pixels carry the (jittered) shape color, background
        pixels the background color, exactly along the stored mask.
        """
        cfg = small_config(per_cell=3, jitter=10)
        train_root, _ = generate_shapeworld(cfg, tmp_path)
        attrs = [json.loads(line) for line in
                 (train_root / "attributes.jsonl").read_text().splitlines()]
        for row in attrs[:6]:
            image = np.asarray(Image.open(
                train_root / "images" / f"{row['id']}.png"))
            mask = np.asarray(Image.open(
                train_root / "masks" / f"{row['id']}.png"))
            assert set(np.unique(mask)) <= {0, 255}
            fg = mask > 0
            assert fg.any() and (~fg).any()
            color = np.asarray(COLORS[row["color"]])
            background = np.asarray(BACKGROUNDS[row["background"]])
            assert np.all(np.abs(image[fg].astype(int) - color) <= cfg.jitter)
            assert np.all(np.abs(image[~fg].astype(int) - background)
                          <= cfg.jitter)

    def test_captions_mention_all_attributes(self, tmp_path):
        train_root, _ = generate_shapeworld(small_config(), tmp_path)
        rows = [json.loads(line) for line in
                (train_root / "captions.jsonl").read_text().splitlines()]
        attrs = {json.loads(line)["id"]: json.loads(line) for line in
                 (train_root / "attributes.jsonl").read_text().splitlines()}
        for row in rows:
            a = attrs[row["id"]]
            assert len(row["captions"]) == len(set(row["captions"])) == 5
            for caption in row["captions"]:
                assert a["color"] in caption
                assert a["shape"] in caption
                assert a["background"] in caption

    def test_meta_contents(self, tmp_path):
        cfg = small_config()
        train_root, _ = generate_shapeworld(cfg, tmp_path)
        meta = json.loads((train_root / "meta.json").read_text())
        assert meta["side"] == 16
        assert meta["seed"] == 7
        assert sorted(meta["colors"]) == ["green", "red"]
        assert meta["heldout_pairs"] == [["red", "triangle"]]


class TestRangeMapping:
    def test_round_trip_endpoints(self):
        pixels = np.array([0, 127, 128, 255], dtype=np.uint8)
        mapped = to_model_range(pixels)
        assert mapped[0] == -1.0
        assert mapped[3] == 1.0
        assert np.all(from_model_range(mapped) == pixels)

    def test_from_model_range_clips(self):
        assert from_model_range(np.array([-2.0, 2.0])).tolist() == [0, 255]


class TestIngestion:
    def test_loads_generated_split(self, tmp_path):
        cfg = small_config()
        train_root, _ = generate_shapeworld(cfg, tmp_path)
        samples = ingest_coco_style(train_root, side=16)
        assert len(samples) == len(samples.ids)
        assert samples.images.shape == (len(samples), 3, 16, 16)
        assert samples.masks.shape == (len(samples), 1, 16, 16)
        assert samples.images.min() >= -1.0 and samples.images.max() <= 1.0
        assert set(torch.unique(samples.masks).tolist()) <= {0.0, 1.0}
        assert samples.meta["side"] == 16
        assert all(len(caps) == 5 for caps in samples.captions)

    def test_resizes_to_requested_side(self, tmp_path):
        train_root, _ = generate_shapeworld(small_config(), tmp_path)
        samples = ingest_coco_style(train_root, side=8)
        assert samples.images.shape[-2:] == (8, 8)
        assert set(torch.unique(samples.masks).tolist()) <= {0.0, 1.0}

    def test_mask_threshold(self, tmp_path):
        Image.fromarray(np.full((8, 8), 200, dtype=np.uint8)).save(
            tmp_path / "m.png")
        assert load_mask_array(tmp_path / "m.png", 8).min() == 1.0
        Image.fromarray(np.full((8, 8), 100, dtype=np.uint8)).save(
            tmp_path / "m2.png")
        assert load_mask_array(tmp_path / "m2.png", 8).max() == 0.0

    def test_center_crop_non_square(self, tmp_path):
        wide = np.zeros((8, 16), dtype=np.uint8)
        wide[:, 4:12] = 255
        Image.fromarray(wide).save(tmp_path / "wide.png")
        out = load_mask_array(tmp_path / "wide.png", 8)
        assert out.shape == (8, 8)
        assert out.min() == 1.0  # crop keeps the bright center

    def test_skips_broken_rows_with_warning(self, tmp_path, caplog):
        train_root, _ = generate_shapeworld(small_config(), tmp_path)
        rows = [json.loads(line) for line in
                (train_root / "captions.jsonl").read_text().splitlines()]
        rows[0]["captions"] = []
        rows[1]["id"] = "does-not-exist"
        with (train_root / "captions.jsonl").open("w") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
        with caplog.at_level("WARNING"):
            samples = ingest_coco_style(train_root, side=16)
        assert len(samples) == len(rows) - 2
        assert sum("skipping" in r.message for r in caplog.records) == 2

    def test_missing_captions_file_raises(self, tmp_path):
        with pytest.raises(DatasetError):
            ingest_coco_style(tmp_path, side=16)

    def test_no_usable_samples_raises(self, tmp_path):
        (tmp_path / "captions.jsonl").write_text(
            json.dumps({"id": "x", "captions": []}) + "\n")
        with pytest.raises(DatasetError):
            ingest_coco_style(tmp_path, side=16)


class TestPyramids:
    def test_image_pyramid_block_means(self):
        """Each coarse pixel is the mean of its source block; recompute the
        block means by reshaping instead of pooling.
        """
        rng = np.random.default_rng(0)
        images = torch.tensor(rng.standard_normal((2, 3, 32, 32)),
                              dtype=torch.float32)
        grids = image_pyramid(images, (8, 16, 32))
        expected8 = images.reshape(2, 3, 8, 4, 8, 4).mean(dim=(3, 5))
        assert torch.allclose(grids[0], expected8, atol=1e-6)
        expected16 = images.reshape(2, 3, 16, 2, 16, 2).mean(dim=(3, 5))
        assert torch.allclose(grids[1], expected16, atol=1e-6)
        assert grids[2] is images

    def test_image_pyramid_bad_divisor(self):
        with pytest.raises(DatasetError):
            image_pyramid(torch.zeros(1, 3, 20, 20), (8,))

    def test_mask_pyramid_is_max_pooled(self):
        masks = torch.zeros(1, 1, 16, 16)
        masks[0, 0, 5, 9] = 1.0
        grids = mask_pyramid(masks, (4, 8, 16))
        assert [g.shape[-1] for g in grids] == [4, 8, 16]
        # the single foreground pixel survives at every level
        assert grids[0][0, 0, 1, 2] == 1.0 and grids[0].sum() == 1.0
        assert grids[1][0, 0, 2, 4] == 1.0 and grids[1].sum() == 1.0


class TestEpochPlanning:
    def test_order_is_permutation(self):
        plan = epoch_plan(50, [5] * 50, batch_size=8, seed=3, epoch=0)
        assert sorted(plan.order.tolist()) == list(range(50))

    def test_caption_choice_in_range(self):
        counts = [1, 2, 3, 4, 5] * 10
        plan = epoch_plan(50, counts, batch_size=8, seed=3, epoch=1)
        for pos, sample in enumerate(plan.order):
            assert 0 <= plan.caption_choice[pos] < counts[sample]

    def test_deterministic_per_seed_and_epoch(self):
        a = epoch_plan(40, [5] * 40, 8, seed=3, epoch=2)
        b = epoch_plan(40, [5] * 40, 8, seed=3, epoch=2)
        assert np.array_equal(a.order, b.order)
        assert np.array_equal(a.caption_choice, b.caption_choice)
        c = epoch_plan(40, [5] * 40, 8, seed=3, epoch=3)
        assert not np.array_equal(a.order, c.order)

    def test_short_final_batch(self):
        plan = epoch_plan(10, [1] * 10, batch_size=4, seed=0, epoch=0)
        assert plan.batches == 3
        idx, caps = plan.batch(2)
        assert len(idx) == 2 and len(caps) == 2
        with pytest.raises(IndexError):
            plan.batch(3)

    def test_epoch_covers_every_sample_once(self, tmp_path):
        train_root, _ = generate_shapeworld(small_config(), tmp_path)
        samples = ingest_coco_style(train_root, side=16)
        seen = []
        for idx, caps in batch_stream(samples, batch_size=4, seed=1, epoch=0):
            seen.extend(idx.tolist())
        assert sorted(seen) == list(range(len(samples)))

    def test_batch_stream_skip_resumes_midway(self, tmp_path):
        train_root, _ = generate_shapeworld(small_config(), tmp_path)
        samples = ingest_coco_style(train_root, side=16)
        full = list(batch_stream(samples, 4, seed=1, epoch=0))
        tail = list(batch_stream(samples, 4, seed=1, epoch=0, skip_batches=2))
        assert len(tail) == len(full) - 2
        for (a_idx, a_cap), (b_idx, b_cap) in zip(full[2:], tail):
            assert np.array_equal(a_idx, b_idx)
            assert np.array_equal(a_cap, b_cap)

    def test_bad_batch_size(self):
        with pytest.raises(DatasetError):
            epoch_plan(10, [1] * 10, batch_size=0, seed=0, epoch=0)
