"""Command-line surface: train, eval, interpret, generate, bench, params,
ablate.

Every run resolves its configuration (preset or YAML file plus flag
overrides), writes the resolved config next to its outputs, and emits
machine-readable comma-delimited lines on stdout alongside any files it
produces. Exit codes are categorized: 0 success, 1 failed expectation,
2 usage, 3 configuration error, 4 data/ingestion error, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import reports
from .aggregation import VARIANTS
from .bench import bench_throughput
from .config import (
    PAPER_PARAM_TARGETS,
    PARAM_TOLERANCE,
    ConfigError,
    RunConfig,
    load_preset,
    load_run_config,
    preset_names,
    save_run_config,
)
from .data import (
    DataError,
    Dataset,
    channel_stats,
    load_cifar10,
    normalize,
    synth_dataset,
)
from .formats import FormatError, append_metrics, load_checkpoint, save_checkpoint, write_pgm, write_ppm
from .generator import expected_gen_params, generate, init_gen_params
from .interpret import cam, cam_to_bbox, bbox_area, gradcat_from_image, normalize_heatmap
from .model import count_params, expected_params, forward, init_params
from .tensor import ShapeError, Tensor
from .training import evaluate, train

EXIT_OK = 0
EXIT_FAILURE = 1        # command ran but the checked expectation failed
EXIT_USAGE = 2          # argparse
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5


# ---------------------------------------------------------------------------
# config / data resolution
# ---------------------------------------------------------------------------


def _load_rc(args) -> RunConfig:
    if getattr(args, "config", None) and getattr(args, "preset", None):
        raise ConfigError("--config and --preset are mutually exclusive")
    if getattr(args, "config", None):
        rc = load_run_config(args.config)
    elif getattr(args, "preset", None):
        rc = load_preset(args.preset)
    else:
        raise ConfigError("one of --config or --preset is required")
    if getattr(args, "seed", None) is not None:
        rc.train = dataclasses.replace(rc.train, seed=args.seed)
        rc.data = dataclasses.replace(rc.data, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        rc.train = dataclasses.replace(rc.train, total_epochs=args.epochs)
    if getattr(args, "batch", None) is not None:
        rc.train = dataclasses.replace(rc.train, total_batch_size=args.batch)
    if getattr(args, "data", None) is not None:
        rc.data = dataclasses.replace(rc.data, source=args.data)
    if getattr(args, "aggregation", None) is not None:
        if rc.kind != "classifier":
            raise ConfigError("--aggregation only applies to classifier configs")
        rc.model = dataclasses.replace(rc.model, aggregation=args.aggregation)
    try:
        rc.train.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return rc


def _classifier(rc: RunConfig, command: str):
    if rc.kind != "classifier":
        raise ConfigError(f"{command} needs a classifier config, got kind={rc.kind!r}")
    return rc.model


def _generator(rc: RunConfig, command: str):
    if rc.kind != "generator":
        raise ConfigError(f"{command} needs a generator config, got kind={rc.kind!r}")
    return rc.model


def _resolve_datasets(rc: RunConfig) -> tuple[Dataset, Dataset]:
    """Raw (unnormalized) train/test splits for the configured source."""
    cfg = rc.model
    src = rc.data.source
    if src == "synth":
        train_ds = synth_dataset(rc.data.n_train, cfg.image_size,
                                 cfg.num_classes, seed=rc.data.seed,
                                 split="train")
        test_ds = synth_dataset(rc.data.n_test, cfg.image_size,
                                cfg.num_classes, seed=rc.data.seed + 1,
                                split="test")
        return train_ds, test_ds
    if src == "cifar10":
        src = os.environ.get("NEST_CIFAR10_DIR", "")
        if not src:
            raise DataError("config wants CIFAR-10: pass --data DIR or set "
                            "NEST_CIFAR10_DIR to the binary batches")
    if cfg.image_size != 32 or cfg.num_classes != 10:
        raise ConfigError(
            f"CIFAR-10 needs image_size 32 / 10 classes, config has "
            f"{cfg.image_size} / {cfg.num_classes}")
    return load_cifar10(src, "train"), load_cifar10(src, "test")


def _normalized(rc: RunConfig, train_ds: Dataset, test_ds: Dataset
                ) -> tuple[np.ndarray, np.ndarray]:
    """Normalize both splits, resolving and persisting the train-split stats
    in the run config the first time they are needed."""
    if rc.data.mean is None or rc.data.std is None:
        mean, std = channel_stats(train_ds.images)
        rc.data = dataclasses.replace(
            rc.data,
            mean=tuple(round(float(v), 8) for v in mean),
            std=tuple(round(float(v), 8) for v in std))
    return (normalize(train_ds.images, rc.data.mean, rc.data.std),
            normalize(test_ds.images, rc.data.mean, rc.data.std))


def _out_dir(args, rc: RunConfig) -> Path:
    if getattr(args, "out", None):
        out = Path(args.out)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = Path("runs") / f"{stamp}-seed{rc.train.seed}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_params(path, expected: int):
    arrays, _meta = load_checkpoint(path)
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    total = sum(v.size for v in arrays.values())
    if total != expected:
        raise ConfigError(
            f"checkpoint {path} holds {total} parameters, config expects {expected}")
    return params


def _classifier_params(args, cfg, seed: int):
    if getattr(args, "ckpt", None):
        return _load_params(args.ckpt, expected_params(cfg))
    print("note: no --ckpt given, using freshly initialized weights",
          file=sys.stderr)
    return init_params(cfg, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    rc = _load_rc(args)
    cfg = _classifier(rc, "train")
    train_ds, test_ds = _resolve_datasets(rc)
    train_x, test_x = _normalized(rc, train_ds, test_ds)
    out = _out_dir(args, rc)
    save_run_config(out / "config.yaml", rc)
    params = init_params(cfg, np.random.default_rng(rc.train.seed))
    print(f"# {count_params(params)} parameters, {len(train_ds)} train / "
          f"{len(test_ds)} eval images, outputs in {out}")
    print("epoch,lr,train_loss,train_acc,eval_acc")

    def on_epoch(row):
        append_metrics(out / "metrics.csv", row)
        print(f"{row['epoch']},{row['lr']:.6g},{row['train_loss']:.6f},"
              f"{row['train_acc']:.4f},{row['eval_acc']:.4f}")

    history = train(params, cfg, rc.train, train_x, train_ds.labels,
                    test_x, test_ds.labels, on_epoch=on_epoch)
    save_checkpoint(out / "model.ckpt", params,
                    meta={"kind": "classifier", "epochs": len(history)})
    reports.loss_curve_figure(history, out / "loss.png")
    last = history[-1]
    print(f"final,{last['train_acc']:.4f},{last['eval_acc']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rc = _load_rc(args)
    cfg = _classifier(rc, "eval")
    train_ds, test_ds = _resolve_datasets(rc)
    _, test_x = _normalized(rc, train_ds, test_ds)
    params = _classifier_params(args, cfg, rc.train.seed)
    acc = evaluate(params, cfg, test_x, test_ds.labels,
                   batch=rc.train.total_batch_size)
    print(f"eval_acc,{acc:.4f}")
    return EXIT_OK


def cmd_interpret(args) -> int:
    rc = _load_rc(args)
    cfg = _classifier(rc, "interpret")
    train_ds, test_ds = _resolve_datasets(rc)
    _, test_x = _normalized(rc, train_ds, test_ds)
    if not 0 <= args.index < len(test_ds):
        raise DataError(f"--index {args.index} outside test split of {len(test_ds)}")
    image = test_x[args.index]
    raw = test_ds.images[args.index]
    params = _classifier_params(args, cfg, rc.train.seed)
    out = _out_dir(args, rc)
    save_run_config(out / "config.yaml", rc)

    logits = forward(params, cfg, image[None]).logits.data[0]
    target = args.target_class if args.target_class is not None \
        else int(logits.argmax())
    print(f"label,{test_ds.labels[args.index]}")
    print(f"predicted,{int(logits.argmax())}")
    print(f"target_class,{target}")

    if args.mode == "gradcat":
        path = gradcat_from_image(params, cfg, image, target)
        doc = path.to_json(cfg.image_size)
        (out / "gradcat.json").write_text(doc + "\n")
        print(doc)
        return EXIT_OK

    heat = cam(params, cfg, image, target)
    if args.mode == "cam":
        write_pgm(out / "cam.pgm", heat.values)
        if args.upsample:
            write_pgm(out / f"cam_{args.upsample}.pgm",
                      heat.upsample(args.upsample))
        reports.heatmap_figure(
            normalize_heatmap(heat.upsample(cfg.image_size)),
            out / "cam.png", title=f"CAM class {target}", image=raw)
        print(f"cam_mean,{heat.values.mean():.6f}")
        print(f"cam_minmax,{heat.values.min():.6f},{heat.values.max():.6f}")
        return EXIT_OK

    # bbox: threshold the image-resolution normalized map
    up = normalize_heatmap(heat.upsample(cfg.image_size))
    box = cam_to_bbox(up, args.threshold)
    doc = {"target_class": target, "threshold": args.threshold,
           "bbox": list(box) if box else None, "area": bbox_area(box)}
    (out / "bbox.json").write_text(json.dumps(doc) + "\n")
    reports.heatmap_figure(up, out / "bbox.png",
                           title=f"bbox t={args.threshold}", image=raw,
                           bbox=box)
    print(json.dumps(doc))
    return EXIT_OK


def cmd_generate(args) -> int:
    rc = _load_rc(args)
    cfg = _generator(rc, "generate")
    out = _out_dir(args, rc)
    save_run_config(out / "config.yaml", rc)
    if args.ckpt:
        # closed-form count for the configured generator
        expected = expected_gen_params(cfg)
        params = _load_params(args.ckpt, expected)
    else:
        print("note: no --ckpt given, generating from freshly initialized "
              "weights", file=sys.stderr)
        params = init_gen_params(cfg, np.random.default_rng(rc.train.seed))
    n = args.batch if args.batch else 1
    z = np.random.default_rng(rc.train.seed).standard_normal(
        (n, cfg.latent_dim)).astype(np.float32)
    outs = generate(params, cfg, z)
    images = outs.images.data
    for i in range(n):
        write_ppm(out / f"sample_{i}.ppm", images[i])
    reports.image_grid_figure(images, out / "samples.png",
                              title=f"{cfg.out_size}x{cfg.out_size} samples")
    print("blocks," + ",".join(str(t.shape[1]) for t in outs.blocked))
    print(f"samples,{n},{out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    rc = _load_rc(args)
    cfg = _classifier(rc, "bench")
    params = init_params(cfg, np.random.default_rng(rc.train.seed))
    rate = bench_throughput(params, cfg, batch=args.batch, iters=args.iters,
                            warmup=args.warmup, seed=rc.train.seed)
    print(f"images_per_second,{rate:.2f}")
    return EXIT_OK


def cmd_params(args) -> int:
    rc = _load_rc(args)
    name = args.preset or "config"
    count = expected_params(rc.model) if rc.kind == "classifier" \
        else expected_gen_params(rc.model)
    if not args.expect_paper:
        print(f"{name},{count}")
        return EXIT_OK
    target = PAPER_PARAM_TARGETS.get(name)
    if target is None:
        raise ConfigError(
            f"no published parameter target for {name!r}; targets exist for "
            f"{', '.join(sorted(PAPER_PARAM_TARGETS))}")
    deviation = (count - target) / target
    ok = abs(deviation) <= PARAM_TOLERANCE
    verdict = "within" if ok else "OUTSIDE"
    print(f"{name},{count},{target},{deviation * 100:+.2f}%,"
          f"{verdict} {PARAM_TOLERANCE:.0%} tolerance")
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_ablate(args) -> int:
    rc = _load_rc(args)
    _classifier(rc, "ablate")
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise ConfigError("--variants is empty")
    train_ds, test_ds = _resolve_datasets(rc)
    train_x, test_x = _normalized(rc, train_ds, test_ds)
    out = _out_dir(args, rc)
    save_run_config(out / "config.yaml", rc)
    rows = []
    print("variant,train_acc,eval_acc")
    for spec in variants:
        cfg = dataclasses.replace(rc.model, aggregation=spec)
        params = init_params(cfg, np.random.default_rng(rc.train.seed))
        history = train(params, cfg, rc.train, train_x, train_ds.labels)
        acc = evaluate(params, cfg, test_x, test_ds.labels,
                       batch=rc.train.total_batch_size)
        rows.append({"variant": spec,
                     "train_acc": history[-1]["train_acc"],
                     "eval_acc": acc})
        print(f"{spec},{rows[-1]['train_acc']:.4f},{acc:.4f}")
    with open(out / "ablation.csv", "w") as fh:
        fh.write("variant,train_acc,eval_acc\n")
        for row in rows:
            fh.write(f"{row['variant']},{row['train_acc']:.4f},"
                     f"{row['eval_acc']:.4f}\n")
    reports.ablation_figure(rows, out / "ablation.png")
    print(f"ablation,{len(rows)},{out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nestvit",
        description="Nested hierarchical transformer: training, "
                    "interpretability, generation.")
    parser.add_argument("--version", action="version",
                        version=f"nestvit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, epochs=False, batch=None, data=False, ckpt=False):
        sp.add_argument("--config", metavar="PATH", help="run config YAML")
        sp.add_argument("--preset", metavar="NAME",
                        help=f"shipped preset: {', '.join(preset_names())}")
        sp.add_argument("--seed", type=int, help="override train/data seed")
        sp.add_argument("--out", metavar="DIR",
                        help="output directory (default runs/<stamp>-seed<N>)")
        if epochs:
            sp.add_argument("--epochs", type=int, help="override total epochs")
        if batch is not None:
            sp.add_argument("--batch", type=int, default=batch,
                            help="override batch size")
        if data:
            sp.add_argument("--data", metavar="DIR|synth",
                            help="dataset source (CIFAR-10 binary dir or 'synth')")
        if ckpt:
            sp.add_argument("--ckpt", metavar="PATH", help="checkpoint to load")

    sp = sub.add_parser("train", help="train a classifier")
    common(sp, epochs=True, batch=None, data=True)
    sp.add_argument("--batch", type=int, help="override batch size")
    sp.add_argument("--aggregation", metavar="NAME[@PLANE]",
                    help=f"override block aggregation ({', '.join(VARIANTS)})")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp, data=True, ckpt=True)
    sp.add_argument("--batch", type=int, help="eval batch size")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("interpret", help="GradCAT / CAM / bbox on one image")
    sp.add_argument("mode", choices=("gradcat", "cam", "bbox"))
    common(sp, data=True, ckpt=True)
    sp.add_argument("--class", dest="target_class", type=int,
                    help="target class (default: predicted)")
    sp.add_argument("--index", type=int, default=0,
                    help="test-split image index (default 0)")
    sp.add_argument("--threshold", type=float, default=0.5,
                    help="bbox threshold on the normalized map (default 0.5)")
    sp.add_argument("--upsample", type=int,
                    help="also write a bilinearly upsampled CAM at this size")
    sp.set_defaults(fn=cmd_interpret)

    sp = sub.add_parser("generate", help="sample images from a generator")
    common(sp, batch=4, ckpt=True)
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("bench", help="measure inference throughput")
    common(sp, batch=8)
    sp.add_argument("--iters", type=int, default=5,
                    help="timed iterations (median is reported)")
    sp.add_argument("--warmup", type=int, default=2,
                    help="untimed warmup iterations")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("params", help="report model parameter count")
    common(sp)
    sp.add_argument("--expect-paper", action="store_true",
                    help="compare against the published count for the preset")
    sp.set_defaults(fn=cmd_params)

    sp = sub.add_parser("ablate", help="train every aggregation variant and "
                                       "emit a comparison CSV")
    common(sp, epochs=True, data=True)
    sp.add_argument("--batch", type=int, help="override batch size")
    sp.add_argument(
        "--variants", default="conv_ln_maxpool,conv_ln_avgpool,patch_merge,subsample_2x2",
        help="comma-separated aggregation specs (default: the four headline "
             "variants)")
    sp.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NotImplementedError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
