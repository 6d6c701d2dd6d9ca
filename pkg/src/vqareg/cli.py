"""Command-line interface.

Subcommands: synth-data, pretrain, finetune, eval, baseline, faitheval,
report, and run (the full experiment grid). See README.md for a walkthrough.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .attreg import RegConfig, write_stats_csv
from .config import load_data_config, load_experiment_config
from .data import DataConfig, generate_benchmark, read_split, write_split
from .estimators import AttRegFineTuner, UpDnClassifier
from .faitheval import (ignored_key_count, keep_interval_eval, region_tvd_curve,
                        spearman)
from .harness import BASELINE_KINDS, evaluate, report, run_baseline, run_experiment
from .model import load_checkpoint, save_checkpoint


def _load_split(data_dir: str, name: str):
    return read_split(Path(data_dir) / f"{name}.jsonl")


def _cmd_synth_data(args) -> int:
    cfg = load_data_config(args.config) if args.config else DataConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in generate_benchmark(cfg, args.seed):
        write_split(out / f"{split.name}.jsonl", split)
        print(f"wrote {split.name}: {len(split)} instances")
    return 0


def _cmd_pretrain(args) -> int:
    train = _load_split(args.data, "train")
    val = _load_split(args.data, "val_indomain")
    clf = UpDnClassifier(
        d_w=args.d_w, d_q=args.d_q, d_h=args.d_h, lr=args.lr, epochs=args.epochs,
        batch_size=args.batch_size, uniform_attention=args.uniform_attention,
        rand_img=args.rand_img, seed=args.seed,
    )
    clf.fit(train, val)
    save_checkpoint(clf.model_, args.checkpoint_out)
    best = getattr(clf, "best_epoch_", None)
    print(f"saved checkpoint to {args.checkpoint_out} (best epoch {best})")
    if args.history_csv:
        from .harness import _history_csv
        _history_csv(Path(args.history_csv), clf.history_)
    return 0


def _cmd_finetune(args) -> int:
    train = _load_split(args.data, "train")
    model = load_checkpoint(args.checkpoint_in)
    mode = "attreg" if args.attreg else "random_mask" if args.rand_mask else "plain"
    tuner = AttRegFineTuner(
        estimator=model, sigma=args.sigma, top_m=args.top_m,
        ignored_pct=args.ignored_pct, lam=args.lam, start_epoch=args.start_epoch,
        epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, mode=mode,
        seed=args.seed,
    )
    tuner.fit(train)
    save_checkpoint(tuner.model_, args.checkpoint_out)
    if args.stats_csv:
        write_stats_csv(args.stats_csv, tuner.epoch_stats_)
    last = tuner.epoch_stats_[-1]
    print(f"saved checkpoint to {args.checkpoint_out} "
          f"(final ignored-key count {last.mean_ignored_key_count:.3f})")
    return 0


def _cmd_eval(args) -> int:
    split = _load_split(args.data, args.split)
    record = evaluate(args.checkpoint, split)
    blob = record.to_dict()
    print(json.dumps(blob, indent=2, sort_keys=True))
    if args.out_json:
        Path(args.out_json).write_text(json.dumps(blob, sort_keys=True))
    return 0


def _cmd_baseline(args) -> int:
    split = _load_split(args.data, args.split)
    train = _load_split(args.data, "train")
    val = _load_split(args.data, "val_indomain")
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    record = run_baseline(args.kind, split, args.seed, train_split=train,
                          val_split=val, model=model)
    blob = record.to_dict()
    print(json.dumps(blob, indent=2, sort_keys=True))
    if args.out_json:
        Path(args.out_json).write_text(json.dumps(blob, sort_keys=True))
    return 0


def _cmd_faitheval(args) -> int:
    split = _load_split(args.data, args.split)
    model = load_checkpoint(args.checkpoint)
    rows: list[dict] = []
    summary: dict = {"mode": args.mode, "source": args.source, "split": args.split}
    if args.mode == "sweep":
        for lo in (0.0, 20.0, 40.0, 60.0, 80.0):
            res = keep_interval_eval(model, split, (lo, lo + 20.0), args.source)
            rows.append({"lo": res.lo, "hi": res.hi, "accuracy": res.accuracy, "n": res.n})
        summary["intervals"] = rows
    elif args.mode == "tvd":
        curve = region_tvd_curve(model, split, args.source)
        rows = [{"rank": r.rank, "mean_tvd": r.mean_tvd} for r in curve]
        summary["spearman_rank_tvd"] = spearman([r.rank for r in curve],
                                                [r.mean_tvd for r in curve])
    else:  # ignored-count
        reg = RegConfig(sigma=args.sigma, top_m=args.top_m, ignored_pct=args.ignored_pct)
        summary["mean_ignored_key_count"] = ignored_key_count(model, split, reg)
    print(json.dumps(summary, indent=2, sort_keys=True))
    if args.out_csv and rows:
        import csv

        with Path(args.out_csv).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    if args.out_json:
        Path(args.out_json).write_text(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_report(args) -> int:
    dest = report(args.runs, args.out)
    print(f"report written to {dest}")
    return 0


def _cmd_run(args) -> int:
    cfg = load_experiment_config(args.config)
    out = run_experiment(cfg, args.out)
    failures = out / "failures.json"
    if failures.exists():
        print(f"completed with failures; see {failures}", file=sys.stderr)
        return 1
    print(f"results written to {out}")
    return 0


def _add_train_dims(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d-w", type=int, default=16)
    p.add_argument("--d-q", type=int, default=32)
    p.add_argument("--d-h", type=int, default=32)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqareg")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic benchmark")
    p.add_argument("--config", help="data config file (key = value)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("pretrain", help="train the backbone with the plain loss")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--uniform-attention", action="store_true")
    p.add_argument("--rand-img", action="store_true")
    _add_train_dims(p)
    p.add_argument("--checkpoint-out", required=True)
    p.add_argument("--history-csv")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint, optionally regularized")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint-in", required=True)
    p.add_argument("--checkpoint-out", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--attreg", action="store_true", help="mask ignored key objects")
    group.add_argument("--rand-mask", action="store_true", help="mask random objects")
    group.add_argument("--plain", action="store_true", help="no regularization (default)")
    p.add_argument("--sigma", type=float, default=0.6)
    p.add_argument("--top-m", type=int, default=3)
    p.add_argument("--ignored-pct", type=float, default=40.0)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--start-epoch", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--stats-csv")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True,
                   choices=("train", "val_indomain", "test_ood"))
    p.add_argument("--out-json")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("baseline", help="score an ordinary baseline policy")
    p.add_argument("--kind", required=True, choices=BASELINE_KINDS)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True,
                   choices=("train", "val_indomain", "test_ood"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", help="needed for top_ans_masked and rand_mask")
    p.add_argument("--out-json")
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("faitheval", help="faithfulness probes for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True,
                   choices=("train", "val_indomain", "test_ood"))
    p.add_argument("--source", default="attention",
                   choices=("attention", "gradient", "uniform"))
    p.add_argument("--mode", required=True, choices=("sweep", "tvd", "ignored-count"))
    p.add_argument("--sigma", type=float, default=0.6)
    p.add_argument("--top-m", type=int, default=3)
    p.add_argument("--ignored-pct", type=float, default=40.0)
    p.add_argument("--out-csv")
    p.add_argument("--out-json")
    p.set_defaults(func=_cmd_faitheval)

    p = sub.add_parser("report", help="merge result directories into tables")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("run", help="run the full experiment grid from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
