"""Command-line entry point.

Subcommands: make-dataset, train, sample, eval, ablate. Exit codes:
0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch
from PIL import Image

from .data import (ShapeWorldConfig, from_model_range, generate_shapeworld,
                   load_dataset, load_mask_array)
from .evaluate import (format_ablation_table, evaluate_checkpoint,
                       generate_images, run_ablation)
from .nets import PLAN_PRESETS
from .train import TrainConfig, fit, load_checkpoint, make_config, read_config_file

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_train_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per TrainConfig field; None means `not given`."""
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int, dest="batch_size")
    parser.add_argument("--lr", type=float)
    parser.add_argument("--beta1", type=float)
    parser.add_argument("--beta2", type=float)
    parser.add_argument("--lambda-patch", type=float, dest="lambda_patch")
    parser.add_argument("--lambda-struct", type=float, dest="lambda_struct")
    parser.add_argument("--lambda-match", type=float, dest="lambda_match")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--plan", choices=sorted(PLAN_PRESETS))
    parser.add_argument("--use-pos", action=argparse.BooleanOptionalAction,
                        dest="use_pos", default=None)
    parser.add_argument("--use-acm", action=argparse.BooleanOptionalAction,
                        dest="use_acm", default=None)
    parser.add_argument("--use-refined", action=argparse.BooleanOptionalAction,
                        dest="use_refined", default=None)
    parser.add_argument("--use-structure-loss",
                        action=argparse.BooleanOptionalAction,
                        dest="use_structure_loss", default=None)
    parser.add_argument("--structure-loss-in-g",
                        action=argparse.BooleanOptionalAction,
                        dest="structure_loss_in_g", default=None)
    parser.add_argument("--max-caption-len", type=int, dest="max_caption_len")
    parser.add_argument("--checkpoint-interval", type=int,
                        dest="checkpoint_interval")
    parser.add_argument("--out-dir", dest="out_dir")
    parser.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                        default=None)


def _config_from_args(args: argparse.Namespace) -> TrainConfig:
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    overrides = {name: getattr(args, name) for name in names if hasattr(args, name)}
    return make_config(args.config, overrides)


def _resolve_seed(args: argparse.Namespace) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if getattr(args, "config", None):
        return int(read_config_file(args.config).get("seed", 0))
    return 0


def cmd_make_dataset(args: argparse.Namespace) -> int:
    config = ShapeWorldConfig(side=args.side, per_cell=args.per_cell,
                              heldout_per_cell=args.heldout_per_cell,
                              seed=_resolve_seed(args))
    train_root, heldout_root = generate_shapeworld(config, args.out)
    print(f"train split:    {train_root}")
    print(f"held-out split: {heldout_root}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    side = PLAN_PRESETS[config.plan]().finest
    samples = load_dataset(args.data, side)
    checkpoint = fit(config, samples, resume_from=args.resume)
    print(f"checkpoint: {checkpoint}")
    return 0


def image_grid(stage_images) -> Image.Image:
    """Stage outputs side by side, upscaled to the finest side."""
    finest = stage_images[-1].shape[-1]
    gap = 2
    k = len(stage_images)
    canvas = Image.new("RGB", (finest * k + gap * (k - 1), finest), "white")
    for col, img in enumerate(stage_images):
        arr = from_model_range(img.numpy()).transpose(1, 2, 0)
        tile = Image.fromarray(arr)
        if tile.size != (finest, finest):
            tile = tile.resize((finest, finest), Image.NEAREST)
        canvas.paste(tile, (col * (finest + gap), 0))
    return canvas


def cmd_sample(args: argparse.Namespace) -> int:
    state = load_checkpoint(args.checkpoint)
    side = state.plan.finest
    mask = torch.from_numpy(load_mask_array(args.mask, side)).view(1, 1, side, side)
    fakes = generate_images(state, [args.caption], mask, seed=_resolve_seed(args))
    grid = image_grid([f[0] for f in fakes])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    grid.save(out)
    print(f"grid: {out}")
    return 0


def _load_splits(dataset_root, side):
    root = Path(dataset_root)
    train_dir = root / "train" if (root / "train").exists() else root
    heldout_dir = root / "heldout" if (root / "heldout").exists() else train_dir
    return load_dataset(train_dir, side), load_dataset(heldout_dir, side)


def cmd_eval(args: argparse.Namespace) -> int:
    state = load_checkpoint(args.checkpoint)
    train_samples, heldout = _load_splits(args.dataset, state.plan.finest)
    report = evaluate_checkpoint(state, train_samples, heldout,
                                 seed=_resolve_seed(args), splits=args.splits,
                                 pool=args.pool)
    report.to_json(args.report)
    print(f"IS:              {report.is_mean:.3f} ± {report.is_std:.3f}")
    print(f"R-precision:     {report.r_precision:.2f}% ± {report.r_precision_std:.2f}")
    print(f"controllability: {report.controllability['rate']:.2f}%")
    print(f"bg/fg change:    {report.disentanglement['background_change']:.4f}"
          f" / {report.disentanglement['foreground_change']:.4f}")
    print(f"report: {args.report}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    side = PLAN_PRESETS[config.plan]().finest
    train_samples, heldout = _load_splits(args.data, side)
    rows = run_ablation(train_samples, heldout, config, config.out_dir,
                        seed=config.seed)
    report_path = Path(config.out_dir) / "ablation.json"
    report_path.write_text(json.dumps(rows, indent=2), encoding="utf-8")
    print(format_ablation_table(rows))
    print(f"report: {report_path}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="textmaskgan",
                     description="Text plus mask conditioned image synthesis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="generate the synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--per-cell", type=int, default=30, dest="per_cell")
    p.add_argument("--heldout-per-cell", type=int, default=5,
                   dest="heldout_per_cell")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="key=value file; only `seed` is read here")
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train", help="train on an ingested dataset")
    p.add_argument("--data", required=True, help="dataset root (train split)")
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_train_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="render a stage grid for one caption+mask")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--mask", required=True, help="mask PNG path")
    p.add_argument("--out", required=True, help="output grid PNG")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="key=value file; only `seed` is read here")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="metrics and probes for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True,
                   help="dataset root containing train/ and heldout/")
    p.add_argument("--report", required=True, help="output JSON path")
    p.add_argument("--splits", type=int, default=2)
    p.add_argument("--pool", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="key=value file; only `seed` is read here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score every ablation flag set")
    p.add_argument("--data", required=True,
                   help="dataset root containing train/ and heldout/")
    _add_train_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # CLI boundary: report and signal failure
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
