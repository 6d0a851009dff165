"""Command-line entry point.

Exit status: 0 success, 2 usage error, 3 data or validation error,
4 numeric failure.  Every command reads and validates all of its inputs
before it writes anything.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .aggregation import (
    METHODS,
    aggregate,
    check_same_coverage,
    read_predictions,
    sliding_window_ensemble,
    write_frame_label_file,
    write_predictions,
    write_video_label_file,
)
from .dataio import load_manifest, read_gold_labels, synth_dataset
from .errors import CefusionError, NumericError
from .metrics import default_class_names, evaluate, evaluate_all_methods, write_reports
from .model import ModelConfig, forward
from .trainer import TrainConfig, inverse_frequency_weights, load_checkpoint, save_checkpoint, train

EXIT_DATA, EXIT_NUMERIC = 3, 4  # argparse exits with 2 on usage errors
CHECKPOINT_NAME = "checkpoint.mmck"
TRAIN_LOG_NAME = "train_log.tsv"


def cmd_train(args) -> int:
    model_cfg = ModelConfig(num_classes=args.k, d_model=args.d_model, window=args.window, dropout=args.dropout)
    train_cfg = TrainConfig(epochs=args.epochs, lr=args.lr, seed=args.seed, patience=args.patience)
    train_set = load_manifest(args.train_manifest)
    val_set = load_manifest(args.val_manifest)
    if args.class_weights == "inverse":
        train_cfg.class_weights = inverse_frequency_weights(train_set, args.k)
    params, trainlog = train(train_set, val_set, model_cfg, train_cfg)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, model_cfg, out / CHECKPOINT_NAME)
    (out / TRAIN_LOG_NAME).write_text(trainlog.to_text())
    print(f"wrote {out / CHECKPOINT_NAME} (best epoch {trainlog.best_epoch}) and {out / TRAIN_LOG_NAME}")
    return 0


def cmd_predict(args) -> int:
    params, config = load_checkpoint(args.checkpoint)
    bundles = load_manifest(args.manifest, dims=config.dims)
    preds = [forward(b, params, config, mode="eval") for b in bundles]
    write_predictions(preds, args.out)
    print(f"wrote {sum(p.frames for p in preds)} frame predictions for {len(preds)} videos to {args.out}")
    return 0


def cmd_aggregate(args) -> int:
    preds = read_predictions(args.predictions)
    labels = {vid: aggregate(fp, args.method) for vid, fp in preds.items()}
    write_video_label_file(labels, args.out)
    print(f"wrote {len(labels)} video labels ({METHODS[args.method][0]}) to {args.out}")
    return 0


def cmd_ensemble(args) -> int:
    runs = [read_predictions(p) for p in args.predictions]
    check_same_coverage(runs)
    fused = {vid: sliding_window_ensemble([run[vid] for run in runs], args.window) for vid in runs[0]}
    write_frame_label_file(fused, args.out)
    print(f"wrote ensembled labels for {len(fused)} videos ({len(runs)} models, window {args.window}) to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    preds = read_predictions(args.predictions)
    gold = read_gold_labels(args.manifest)
    K = args.k
    if K is None:
        with_logits = [fp for fp in preds.values() if fp.logits is not None]
        K = with_logits[0].logits.shape[1] if with_logits else 7
    names = args.class_names.split(",") if args.class_names else default_class_names(K)
    if len(names) != K:
        raise CefusionError(f"--class-names lists {len(names)} names for {K} classes")

    if args.level == "video" and args.method == "all":
        reports = evaluate_all_methods(preds, gold, K)
    else:
        method = "vote" if args.method == "all" else args.method
        reports = [evaluate(preds, gold, K, level=args.level, method=method)]
    table, kv = write_reports(reports, args.out, names)
    print(table.read_text(), end="")
    print(f"wrote {table} and {kv}")
    return 0


def cmd_synth(args) -> int:
    result = synth_dataset(args.seed, args.videos, args.frames, args.k, args.separation,
                           out_dir=args.out_dir, val_videos=args.val_videos)
    print(f"wrote {len(result.bundles)} synthetic videos and {result.manifest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="cefusion", description="Multimodal compound-expression recognition")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train on one manifest, select on another")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=7, help="number of classes")
    p.add_argument("--d-model", type=int, default=256)
    p.add_argument("--window", type=int, default=3, help="co-attention context radius W")
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--class-weights", choices=["none", "inverse"], default="none")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="write per-frame predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("aggregate", parents=[common], help="one label per video")
    p.add_argument("--predictions", required=True)
    p.add_argument("--method", required=True, choices=sorted(METHODS))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("ensemble", parents=[common], help="sliding-window vote across models")
    p.add_argument("--predictions", required=True, action="append")
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("evaluate", parents=[common], help="F1 report against a gold manifest")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--level", choices=["frame", "video"], default="frame")
    p.add_argument("--method", choices=[*sorted(METHODS), "all"], default="vote")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--class-names", default=None, help="comma-separated, one per class")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic feature corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--videos", type=int, default=24)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--k", type=int, default=7)
    p.add_argument("--separation", type=float, default=8.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-videos", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "window", 1) < 0 or getattr(args, "epochs", 1) < 1:
        parser.error("--window must be >= 0 and --epochs >= 1")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"cefusion: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CefusionError, OSError, ValueError) as exc:
        print(f"cefusion: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
