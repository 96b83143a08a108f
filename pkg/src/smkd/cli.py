"""Command-line entry point: ``smkd pretrain | train | eval | visualize``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import fewshot
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, DataConfig, RunConfig, load_config
from .data import DataFormatError, LabeledDataset, default_splits, generate_synthetic, load_cifar_binary, read_split_file, split_dataset
from .tensor import NumericError
from .trainer import LOSS_MODES, ModelPair, metric_columns, train_stage
from .visualize import correspondences, draw_correspondences, read_ppm, write_attention, write_ppm
from .vit import Backbone

log = logging.getLogger("smkd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_splits(data_cfg: DataConfig) -> dict[str, LabeledDataset]:
    """Build the base/val/novel datasets described by ``data_cfg``."""
    if data_cfg.dataset == "synthetic":
        ds = generate_synthetic(data_cfg.n_classes, data_cfg.per_class, data_cfg.image_size, data_cfg.data_seed)
    else:
        ds = load_cifar_binary(data_cfg.dataset, data_cfg.variant)
    if data_cfg.split_file:
        splits = read_split_file(data_cfg.split_file)
    else:
        n = int(ds.labels.max()) + 1 if len(ds) else 0
        splits = default_splits(n, data_cfg.base_classes, data_cfg.val_classes, data_cfg.novel_classes)
    return split_dataset(ds, splits)


def write_metrics(path: Path, columns: list[str], rows: list[dict], append: bool = False) -> None:
    fresh = not (append and path.exists())
    with path.open("w" if fresh else "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        if fresh:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})


def _run_stage(args, stage: str) -> int:
    cfg = load_config(args.config)
    overrides = {"stage": stage}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if stage == "supervised":
        if args.loss is not None:
            overrides["loss"] = args.loss
        if args.lam is not None:
            overrides["lam"] = args.lam
        if args.cold_start:
            overrides["cold_start"] = True
    train_cfg = replace(cfg.train, **overrides)
    cfg = replace(cfg, train=train_cfg)

    init: ModelPair | None = None
    if args.init:
        init, _ = load_checkpoint(args.init, expected_hash=cfg.arch_hash(), strict=args.strict)
    resuming = init is not None and init.stage == stage

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = "pretrain" if stage == "ssl_pretrain" else "train"
    ckpt = out_dir / f"{name}.ckpt"
    metrics = out_dir / f"{name}_metrics.csv"
    columns = metric_columns(train_cfg)
    if not resuming:
        write_metrics(metrics, columns, [])

    def on_epoch(model, row):
        write_metrics(metrics, columns, [row], append=True)
        save_checkpoint(ckpt, model, cfg.arch_hash())

    splits = load_splits(cfg.data)
    model, rows = train_stage(splits["base"], train_cfg, init, on_epoch=on_epoch)
    save_checkpoint(ckpt, model, cfg.arch_hash())
    print(f"wrote {ckpt} ({model.step} steps) and {metrics}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    return _run_stage(args, "ssl_pretrain")


def cmd_train(args) -> int:
    return _run_stage(args, "supervised")


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    expected = cfg.arch_hash() if args.config else None
    model, _ = load_checkpoint(args.checkpoint, expected_hash=expected, strict=args.strict)
    ev = cfg.eval
    modes = (args.mode or ev.mode).split(",")
    methods = (args.method or ev.method).split(",")
    for m in methods:
        if m not in fewshot.METHODS:
            raise UsageError(f"unknown method {m!r}; choose from {', '.join(fewshot.METHODS)}")
    try:
        parsed = [fewshot.FeatureMode.parse(m) for m in modes]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    n_way = args.n_way or ev.n_way
    k_shot = args.k_shot or ev.k_shot
    episodes = args.episodes or ev.episodes
    seed = 0 if args.seed is None else args.seed

    novel = load_splits(cfg.data)["novel"]
    backbone = Backbone(model.vit, model.teacher)
    results = []
    for fm in parsed:
        feats = fewshot.extract_features(backbone, novel.images, fm)
        for method in methods:
            results.append(fewshot.evaluate_features(feats, novel.labels, episodes, n_way, k_shot, ev.n_query, method, seed, fm.name))

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fewshot.write_report(results, out_dir / "eval_report.csv")
    with (out_dir / "eval_episodes.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "mode", "episode", "accuracy"])
        for r in results:
            for i, a in enumerate(r.accuracies):
                writer.writerow([r.method, r.mode, i, f"{a:.10f}"])
    print(f"{'method':<11} {'mode':<18} {'N':>2} {'K':>2} {'acc':>7} {'ci95':>7} {'episodes':>8}")
    for r in results:
        print(f"{r.method:<11} {r.mode:<18} {r.n_way:>2} {r.k_shot:>2} {100 * r.mean_acc:>6.2f}% {100 * r.ci95:>6.2f}% {r.n_episodes:>8}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    model, _ = load_checkpoint(args.checkpoint, strict=args.strict)
    backbone = Backbone(model.vit, model.teacher)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = [read_ppm(p).transpose(2, 0, 1) for p in args.images]
    for path, img in zip(args.images, images):
        if img.shape[1] != img.shape[2] or img.shape[1] % model.vit.patch_size:
            raise DataFormatError(f"{path}: image must be square with side divisible by {model.vit.patch_size}")
        write_attention(backbone, img, out_dir, Path(path).stem)
    for (pa, a), (pb, b) in zip(zip(args.images, images), zip(args.images[1:], images[1:])):
        if a.shape != b.shape:
            continue
        lines = correspondences(backbone, a, b)
        write_ppm(out_dir / f"{Path(pa).stem}__{Path(pb).stem}_match.ppm", draw_correspondences(a, b, lines))
    print(f"wrote visualizations to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smkd", description="Masked teacher/student distillation for few-shot ViTs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--strict", action="store_true", help="treat config-hash mismatches as errors")
        p.add_argument("--out-dir", default="runs")

    p = sub.add_parser("pretrain", help="self-supervised stage")
    p.add_argument("--config", required=True)
    p.add_argument("--init", default=None, help="checkpoint to resume from")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="supervised distillation stage")
    p.add_argument("--config", required=True)
    p.add_argument("--init", default=None, help="pretrained checkpoint (required unless --cold-start)")
    p.add_argument("--loss", choices=LOSS_MODES, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--cold-start", action="store_true")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="episodic few-shot evaluation")
    p.add_argument("checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--n-way", type=int, default=None)
    p.add_argument("--k-shot", type=int, default=None)
    p.add_argument("--mode", default=None, help="comma-separated feature modes, e.g. cls,cls+weighted")
    p.add_argument("--method", default=None, help="prototype, classifier, or both comma-separated")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="attention and correspondence images")
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+", help="P6 PPM images")
    common(p)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "command", None) == "train" and not args.init and not args.cold_start:
        print("smkd train: error: --init is required (or pass --cold-start)", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"smkd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"smkd {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, DataFormatError, ValueError, OSError) as exc:
        print(f"smkd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
