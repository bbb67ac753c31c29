"""Command-line surface: train | eval | infer | inspect | gen-data | gradcheck."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .checkpoint import build_model, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import (NormStats, Sample, augment, compute_stats, generate_synthetic,
                   load_dataset, normalize, read_image, write_ppm)
from .errors import ConfigError, SoftTreeError
from .gradcam import all_sites, grad_cam, write_pgm
from .gradcheck import run_primitive_gradchecks
from .reports import (save_inspection_figure, save_training_curves,
                      write_eval_report, write_inspection_report,
                      write_metrics_line)
from .training import evaluate, fit_two_stage


def _load_datasets(cfg: RunConfig):
    if cfg.data_root:
        root = Path(cfg.data_root)
        train = load_dataset(root / "train", split="train")
        test = load_dataset(root / "test", split="test")
        if train.class_names != test.class_names:
            raise ConfigError("train/test class directories disagree")
        return train, test
    return generate_synthetic(cfg.data_synthetic_classes,
                              cfg.data_synthetic_per_class,
                              cfg.data_synthetic_side,
                              cfg.data_synthetic_seed)


def _stats_from_config(cfg: RunConfig) -> NormStats:
    if len(cfg.data_stats_mean) != 3 or len(cfg.data_stats_std) != 3:
        raise ConfigError("checkpoint config lacks normalization statistics")
    return NormStats(mean=tuple(cfg.data_stats_mean), std=tuple(cfg.data_stats_std))


def _preprocess(image: np.ndarray, cfg: RunConfig) -> Tensor:
    """Eval-path preprocessing: resize, center crop, normalize, batch of 1."""
    sample = Sample(image=image, label=0, id="input")
    sample = normalize(augment(sample, cfg.augment_policy(), rng=None),
                       _stats_from_config(cfg))
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    return Tensor(sample.image[None].astype(dtype))


def cmd_train(args) -> int:
    if args.resume:
        model, cfg = load_checkpoint(args.resume)
        if args.out:
            cfg.out = args.out
        start_stage = cfg.completed_stages
        train_ds, test_ds = _load_datasets(cfg)
        stats = _stats_from_config(cfg)
    else:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out:
            cfg.out = args.out
        train_ds, test_ds = _load_datasets(cfg)
        cfg.tree_classes = train_ds.num_classes
        cfg.data_class_names = tuple(train_ds.class_names)
        stats = compute_stats(train_ds)
        cfg.data_stats_mean = stats.mean
        cfg.data_stats_std = stats.std
        model = build_model(cfg, train_ds.num_classes)
        start_stage = 0

    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = cfg.train_plan()
    records = []

    def on_checkpoint(tag, m, stage_number):
        completed = stage_number if tag.startswith("stage") else stage_number - 1
        snapshot = cfg.completed_stages
        cfg.completed_stages = completed
        save_checkpoint(m, cfg, out_dir / f"{tag}.ckpt")
        cfg.completed_stages = snapshot

    with open(out_dir / "metrics.jsonl", "w", encoding="utf-8") as metrics:
        def sink(record):
            records.append(record)
            write_metrics_line(metrics, record)

        fit_two_stage(model, train_ds, test_ds, plan, cfg.augment_policy(),
                      stats, sink=sink, on_checkpoint=on_checkpoint,
                      start_stage=start_stage)
    save_training_curves(records, out_dir / "curves.png")
    print(f"trained {len(records)} epochs; outputs in {out_dir}")
    return 0


def cmd_eval(args) -> int:
    model, cfg = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data, split="eval")
    if dataset.num_classes != model.config.num_classes:
        raise ConfigError(
            f"dataset has {dataset.num_classes} classes, model expects "
            f"{model.config.num_classes}")
    report = evaluate(model, dataset, cfg.augment_policy(),
                      _stats_from_config(cfg), batch_size=args.batch_size)
    print(f"top1 = {report['top1']:.4f}  ({report['count']} samples)")
    for j, acc in enumerate(report["per_leaf_top1"], start=1):
        print(f"leaf {j} top1 = {acc:.4f}")
    for name, acc in zip(cfg.data_class_names, report["per_class_top1"]):
        print(f"class {name} top1 = {acc:.4f}")
    out_dir = Path(args.out) if args.out else Path(args.ckpt).parent
    write_eval_report(report, list(cfg.data_class_names), out_dir)
    return 0


def cmd_infer(args) -> int:
    model, cfg = load_checkpoint(args.ckpt)
    x = _preprocess(read_image(args.image), cfg)
    pred = model.forward(x, training=False)
    probs = pred.final.data[0]
    order = np.argsort(-probs, kind="stable")  # ties resolve to lower class index
    k = min(args.topk, probs.size)
    names = list(cfg.data_class_names) or [str(i) for i in range(probs.size)]
    for rank in range(k):
        cls = int(order[rank])
        print(f"{rank + 1}. class {cls} ({names[cls]}) confidence = {probs[cls]:.6f}")
    return 0


def cmd_inspect(args) -> int:
    model, cfg = load_checkpoint(args.ckpt)
    raw = read_image(args.image)
    x = _preprocess(raw, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    pred = model.forward(x, training=False)
    target = int(pred.predicted_class()[0])
    heatmaps = {}
    for site in all_sites(model.config.height):
        hm = grad_cam(model, x, target, site)
        heatmaps[site] = hm
        write_pgm(hm, out_dir / (site.replace(":", "_") + ".pgm"))
    write_inspection_report(out_dir / "report.txt", pred,
                            list(cfg.data_class_names))
    shown = augment(Sample(image=raw, label=0, id="input"),
                    cfg.augment_policy(), rng=None).image
    save_inspection_figure(shown, heatmaps, pred, out_dir / "inspect.png")
    print(f"wrote {len(heatmaps)} heatmaps and report.txt to {out_dir}")
    return 0


def cmd_gen_data(args) -> int:
    train, test = generate_synthetic(args.classes, args.per_class, args.side,
                                     args.seed)
    out = Path(args.out)
    for ds in (train, test):
        meta = []
        for sample in ds.samples:
            cdir = out / ds.split / ds.class_names[sample.label]
            cdir.mkdir(parents=True, exist_ok=True)
            write_ppm(cdir / f"{sample.id}.ppm", sample.image)
            meta.append({"id": f"{ds.class_names[sample.label]}/{sample.id}.ppm",
                         "glyph_box": list(sample.meta["glyph_box"])})
        with open(out / f"{ds.split}_meta.jsonl", "w", encoding="utf-8") as f:
            for entry in meta:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
    print(f"wrote {len(train.samples)} train / {len(test.samples)} test "
          f"images under {out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_primitive_gradchecks(step=args.step, tol=args.tol)
    failed = 0
    for name, err, ok in results:
        print(f"{'PASS' if ok else 'FAIL'} {name:24s} max_rel_err={err:.3e}")
        failed += 0 if ok else 1
    print(f"{len(results) - failed}/{len(results)} primitives passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="softtree",
        description="Soft-routed binary neural tree classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the staged training schedule")
    p.add_argument("--config", required=False, help="run configuration file")
    p.add_argument("--out", default="", help="output directory (overrides config)")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--resume", default="", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="split directory (class subdirs)")
    p.add_argument("--out", default="", help="report directory (default: ckpt dir)")
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="rank classes for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--topk", type=int, default=5)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("inspect", help="write gate/leaf report and heatmaps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("gen-data", help="write the synthetic dataset as PPM files")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("gradcheck", help="finite-difference check of all primitives")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "train" and not args.resume and not args.config:
        print("error: train needs --config (or --resume)", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except SoftTreeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
