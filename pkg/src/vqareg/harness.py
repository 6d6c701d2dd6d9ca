"""Experiment orchestration: pretraining, evaluation, prior-exploiting
baselines, ablation grids, and results persistence.

run_experiment executes, per seed: pretraining with in-domain validation
selection, the configured fine-tuning and baseline modes, evaluation on all
three splits, and the faithfulness probes; it writes a deterministic
metrics.json plus per-epoch and plot-data CSVs. report merges one or more
result directories into aggregate tables.
"""

from __future__ import annotations

import csv
import json
import traceback
from dataclasses import dataclass
from pathlib import Path
from statistics import median

import numpy as np

from .attreg import EpochStats, write_stats_csv
from .config import ExperimentConfig, config_digest
from .data import DatasetSplit, generate_benchmark, read_split, write_split
from .estimators import AttRegFineTuner, UpDnClassifier
from .faitheval import (GROUNDING_SOURCES, ignored_key_count, keep_interval_eval,
                        region_tvd_curve, spearman)
from .metrics import MetricsRecord, accuracy, score_predictions
from .model import VqaModel, load_checkpoint, save_checkpoint

__all__ = [
    "accuracy", "MetricsRecord", "score_predictions", "evaluate",
    "train_histograms", "run_baseline", "run_experiment", "report",
    "BASELINE_KINDS", "EXPERIMENT_MODES",
]

BASELINE_KINDS = ("random_predictions", "random_predictions_inverted",
                  "top_ans_masked", "rand_img", "rand_mask")
EXPERIMENT_MODES = ("plain", "attreg", "rand_mask", "end_to_end", "uniform",
                    "rand_img", "random_predictions", "random_predictions_inverted",
                    "top_ans_masked")


def evaluate(model_or_path, split: DatasetSplit, batch_size: int = 256) -> MetricsRecord:
    """Argmax-answer evaluation of a model or checkpoint on one split."""
    model = model_or_path
    if isinstance(model_or_path, (str, Path)):
        model = load_checkpoint(model_or_path)
    if tuple(model.config.answer_vocab) != tuple(split.answer_vocab):
        raise ValueError("answer vocabulary mismatch between checkpoint and split")
    return score_predictions(split, model.predict_answers(split, batch_size))


# ---------------------------------------------------------------------------
# ordinary baselines


def train_histograms(train_split: DatasetSplit) -> dict[str, np.ndarray]:
    """Per question category, the normalized histogram of annotator answers."""
    vocab = {a: j for j, a in enumerate(train_split.answer_vocab)}
    hists: dict[str, np.ndarray] = {}
    for _, qa in train_split.instances:
        h = hists.setdefault(qa.question_category, np.zeros(len(vocab)))
        for ans in qa.answers:
            h[vocab[ans]] += 1.0
    return {c: h / h.sum() for c, h in hists.items()}


def _inverted_histogram(h: np.ndarray) -> np.ndarray:
    inv = np.zeros_like(h)
    support = h > 0
    inv[support] = 1.0 / h[support]
    return inv / inv.sum()


def run_baseline(kind: str, split: DatasetSplit, seed: int = 0, *,
                 train_split: DatasetSplit | None = None,
                 val_split: DatasetSplit | None = None,
                 model: VqaModel | None = None,
                 classifier_params: dict | None = None,
                 finetuner_params: dict | None = None) -> MetricsRecord:
    """Score one of the ordinary baseline policies on a split.

    random_predictions(-inverted) need train_split for the answer histograms;
    top_ans_masked and rand_mask need a trained model; rand_img and rand_mask
    are training-time policies and train a checkpoint before evaluating.
    """
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")
    if kind in ("random_predictions", "random_predictions_inverted"):
        if train_split is None:
            raise ValueError(f"{kind} needs train_split for its answer histograms")
        hists = train_histograms(train_split)
        if kind == "random_predictions_inverted":
            hists = {c: _inverted_histogram(h) for c, h in hists.items()}
        rng = np.random.default_rng(np.random.SeedSequence([seed, 21]))
        vocab = train_split.answer_vocab
        preds = [vocab[int(rng.choice(len(vocab), p=hists[qa.question_category]))]
                 for _, qa in split.instances]
        return score_predictions(split, preds)
    if kind == "top_ans_masked":
        if model is None:
            raise ValueError("top_ans_masked needs a trained model")
        probs = model.predict_probs(split).copy()
        probs[np.arange(len(probs)), probs.argmax(axis=1)] = -np.inf
        preds = [model.config.answer_vocab[j] for j in probs.argmax(axis=1)]
        return score_predictions(split, preds)
    if kind == "rand_img":
        if train_split is None:
            raise ValueError("rand_img trains from scratch and needs train_split")
        clf = UpDnClassifier(**{**(classifier_params or {}), "rand_img": True, "seed": seed})
        clf.fit(train_split, val_split)
        return evaluate(clf.model_, split)
    # rand_mask: random-mask fine-tuning of a pretrained model
    if model is None or train_split is None:
        raise ValueError("rand_mask needs a pretrained model and train_split")
    tuner = AttRegFineTuner(estimator=model,
                            **{**(finetuner_params or {}), "mode": "random_mask", "seed": seed})
    tuner.fit(train_split)
    return evaluate(tuner.model_, split)


# ---------------------------------------------------------------------------
# experiment runner


@dataclass
class _RunContext:
    cfg: ExperimentConfig
    out: Path
    splits: dict[str, DatasetSplit]
    rows: list[dict]
    faith_rows: list[dict]
    sweep_rows: list[dict]
    tvd_rows: list[dict]
    count_rows: list[dict]
    failures: list[dict]


def _classifier(cfg: ExperimentConfig, seed: int, **overrides) -> UpDnClassifier:
    base = dict(d_w=cfg.d_w, d_q=cfg.d_q, d_h=cfg.d_h, lr=cfg.pretrain_lr,
                epochs=cfg.pretrain_epochs, batch_size=cfg.batch_size, seed=seed)
    base.update(overrides)
    return UpDnClassifier(**base)


def _finetuner(cfg: ExperimentConfig, estimator, seed: int, **overrides) -> AttRegFineTuner:
    base = dict(estimator=estimator, sigma=cfg.sigma, top_m=cfg.top_m,
                ignored_pct=cfg.ignored_pct, lam=cfg.lambdas[0],
                start_epoch=cfg.start_epoch, epochs=cfg.finetune_epochs,
                lr=cfg.finetune_lr, batch_size=cfg.batch_size, seed=seed)
    base.update(overrides)
    return AttRegFineTuner(**base)


def _eval_rows(ctx: _RunContext, model: VqaModel, seed: int, mode: str,
               lam: float | None = None, sigma: float | None = None) -> None:
    for split in ctx.splits.values():
        rec = evaluate(model, split)
        ctx.rows.append({"seed": seed, "mode": mode, "lambda": lam, "sigma": sigma,
                         "split": split.name, "record": rec.to_dict()})


def _policy_rows(ctx: _RunContext, kind: str, seed: int, model: VqaModel | None) -> None:
    for split in ctx.splits.values():
        rec = run_baseline(kind, split, seed, train_split=ctx.splits["train"], model=model)
        ctx.rows.append({"seed": seed, "mode": kind, "lambda": None, "sigma": None,
                         "split": split.name, "record": rec.to_dict()})


def _history_csv(path: Path, history: list[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_accuracy"])
        for row in history:
            val = row["val"].overall if row["val"] is not None else ""
            writer.writerow([row["epoch"], repr(row["train_loss"]),
                             repr(val) if val != "" else ""])


def _count_rows(ctx: _RunContext, seed: int, mode: str, stats: list[EpochStats]) -> None:
    for s in stats:
        ctx.count_rows.append({
            "seed": seed, "mode": mode, "epoch": s.epoch,
            "mean_ignored_key_count": s.mean_ignored_key_count,
            "loss_vqa": s.loss_vqa, "loss_reg": s.loss_reg,
        })


def _run_finetune(ctx: _RunContext, pre: UpDnClassifier, seed: int, mode_label: str,
                  run_dir: Path, **tuner_overrides) -> AttRegFineTuner:
    tuner = _finetuner(ctx.cfg, pre, seed, **tuner_overrides)
    tuner.fit(ctx.splits["train"])
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(tuner.model_, run_dir / "checkpoint.json")
    write_stats_csv(run_dir / "stats.csv", tuner.epoch_stats_)
    _count_rows(ctx, seed, mode_label, tuner.epoch_stats_)
    return tuner


def _faithfulness(ctx: _RunContext, model: VqaModel, seed: int, tag: str) -> None:
    split = ctx.splits["val_indomain"]
    intervals = [(lo, lo + 20.0) for lo in (0.0, 20.0, 40.0, 60.0, 80.0)]
    for source in GROUNDING_SOURCES:
        for lo, hi in intervals:
            res = keep_interval_eval(model, split, (lo, hi), source)
            ctx.sweep_rows.append({"seed": seed, "model": tag, "source": source,
                                   "lo": lo, "hi": hi, "accuracy": res.accuracy,
                                   "n": res.n})
        curve = region_tvd_curve(model, split, source)
        for rec in curve:
            ctx.tvd_rows.append({"seed": seed, "model": tag, "source": source,
                                 "rank": rec.rank, "mean_tvd": rec.mean_tvd})
        rho = spearman([r.rank for r in curve], [r.mean_tvd for r in curve])
        ctx.faith_rows.append({"seed": seed, "model": tag, "source": source,
                               "spearman_rank_tvd": rho})


def _run_seed(ctx: _RunContext, seed: int) -> None:
    cfg = ctx.cfg
    seed_dir = ctx.out / "runs" / f"seed{seed}"
    train, val = ctx.splits["train"], ctx.splits["val_indomain"]

    pre = _classifier(cfg, seed).fit(train, val)
    pre_dir = seed_dir / "pretrain"
    pre_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(pre.model_, pre_dir / "checkpoint.json")
    _history_csv(pre_dir / "history.csv", pre.history_)
    _eval_rows(ctx, pre.model_, seed, "pretrain")

    for mode in cfg.modes:
        try:
            if mode == "plain":
                tuner = _run_finetune(ctx, pre, seed, "plain", seed_dir / "plain",
                                      mode="plain")
                _eval_rows(ctx, tuner.model_, seed, "plain")
            elif mode == "attreg":
                for sigma in (cfg.sigmas or (cfg.sigma,)):
                    for lam in cfg.lambdas:
                        label = f"attreg_lam{lam:g}" + (
                            f"_sig{sigma:g}" if cfg.sigmas else "")
                        tuner = _run_finetune(ctx, pre, seed, label, seed_dir / label,
                                              mode="attreg", lam=lam, sigma=sigma)
                        _eval_rows(ctx, tuner.model_, seed, "attreg", lam, sigma)
            elif mode == "rand_mask":
                tuner = _run_finetune(ctx, pre, seed, "rand_mask", seed_dir / "rand_mask",
                                      mode="random_mask")
                _eval_rows(ctx, tuner.model_, seed, "rand_mask")
            elif mode == "end_to_end":
                fresh = _classifier(cfg, seed)
                tuner = _run_finetune(
                    ctx, fresh, seed, "end_to_end", seed_dir / "end_to_end",
                    mode="attreg", start_epoch=0,
                    epochs=cfg.pretrain_epochs + cfg.finetune_epochs,
                    lr=cfg.pretrain_lr)
                _eval_rows(ctx, tuner.model_, seed, "end_to_end", cfg.lambdas[0])
            elif mode == "uniform":
                clf = _classifier(cfg, seed, uniform_attention=True).fit(train, val)
                run_dir = seed_dir / "uniform"
                run_dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(clf.model_, run_dir / "checkpoint.json")
                _history_csv(run_dir / "history.csv", clf.history_)
                _eval_rows(ctx, clf.model_, seed, "uniform")
            elif mode == "rand_img":
                clf = _classifier(cfg, seed, rand_img=True).fit(train, val)
                run_dir = seed_dir / "rand_img"
                run_dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(clf.model_, run_dir / "checkpoint.json")
                _eval_rows(ctx, clf.model_, seed, "rand_img")
            elif mode in ("random_predictions", "random_predictions_inverted"):
                _policy_rows(ctx, mode, seed, None)
            elif mode == "top_ans_masked":
                _policy_rows(ctx, mode, seed, pre.model_)
            else:
                raise ValueError(f"unknown experiment mode {mode!r}")
        except Exception as exc:  # noqa: BLE001 - preserved in the failure manifest
            ctx.failures.append({"seed": seed, "mode": mode, "error": repr(exc),
                                 "traceback": traceback.format_exc()})

    if cfg.faithfulness:
        _faithfulness(ctx, pre.model_, seed, "pretrain")


def _write_plot_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([
                repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns
            ])


def _key_object_ratio(split: DatasetSplit, sigma: float, top_m: int) -> float:
    from .attreg import identify_key_objects
    from .data import EmbeddingTable

    table = EmbeddingTable()
    hits = sum(
        1 for scene, qa in split.instances
        if identify_key_objects(scene, qa.nouns, table, sigma, top_m)
    )
    return hits / len(split.instances)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path) -> Path:
    """Run the full grid for the config; returns the results directory.

    Failures of individual grid points are recorded in failures.json and do
    not abort the remaining runs.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if cfg.data_dir is not None:
        data_dir = Path(cfg.data_dir)
    else:
        data_dir = out / "data"
        data_dir.mkdir(exist_ok=True)
        if not (data_dir / "train.jsonl").exists():
            for split in generate_benchmark(cfg.data, cfg.data_seed):
                write_split(data_dir / f"{split.name}.jsonl", split)
    splits = {name: read_split(data_dir / f"{name}.jsonl")
              for name in ("train", "val_indomain", "test_ood")}

    ctx = _RunContext(cfg=cfg, out=out, splits=splits, rows=[], faith_rows=[],
                      sweep_rows=[], tvd_rows=[], count_rows=[], failures=[])
    for seed in cfg.seeds:
        _run_seed(ctx, seed)

    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    _write_plot_csv(plots / "ignored_key_counts.csv", ctx.count_rows,
                    ["seed", "mode", "epoch", "mean_ignored_key_count",
                     "loss_vqa", "loss_reg"])
    if ctx.sweep_rows:
        _write_plot_csv(plots / "keep_interval_accuracy.csv", ctx.sweep_rows,
                        ["seed", "model", "source", "lo", "hi", "accuracy", "n"])
    if ctx.tvd_rows:
        _write_plot_csv(plots / "region_tvd.csv", ctx.tvd_rows,
                        ["seed", "model", "source", "rank", "mean_tvd"])

    sigma_ratios = None
    if cfg.sigmas:
        sigma_ratios = {repr(s): _key_object_ratio(splits["train"], s, cfg.top_m)
                        for s in cfg.sigmas}

    metrics = {
        "config_hash": config_digest(cfg),
        "seeds": list(cfg.seeds),
        "results": sorted(ctx.rows, key=_row_key),
        "faithfulness": sorted(ctx.faith_rows,
                               key=lambda r: (r["seed"], r["model"], r["source"])),
    }
    if sigma_ratios is not None:
        metrics["sigma_ratios"] = sigma_ratios
    (out / "metrics.json").write_text(
        json.dumps(metrics, sort_keys=True, separators=(",", ":")) + "\n")

    if ctx.failures:
        (out / "failures.json").write_text(json.dumps(ctx.failures, indent=2))
    return out


def _row_key(row: dict) -> tuple:
    return (row["seed"], row["mode"],
            -1.0 if row["lambda"] is None else row["lambda"],
            -1.0 if row["sigma"] is None else row["sigma"], row["split"])


# ---------------------------------------------------------------------------
# report: merge result directories into aggregate tables


def _load_rows(run_dirs: list[Path]) -> tuple[list[dict], list[dict]]:
    rows, faith = [], []
    for d in run_dirs:
        blob = json.loads((Path(d) / "metrics.json").read_text())
        rows.extend(blob["results"])
        faith.extend(blob.get("faithfulness", []))
    return rows, faith


def report(run_dirs: list[str | Path], dest: str | Path) -> Path:
    """Merge metrics from one or more result directories into summary tables."""
    dest = Path(dest)
    (dest / "tables").mkdir(parents=True, exist_ok=True)
    rows, faith = _load_rows([Path(d) for d in run_dirs])

    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        key = (row["mode"], row["lambda"], row["sigma"], row["split"])
        groups.setdefault(key, []).append(row["record"])

    categories = sorted({c for row in rows for c in row["record"]["per_category"]})
    table_rows = []
    for (mode, lam, sigma, split), recs in sorted(
            groups.items(), key=lambda kv: (kv[0][0], str(kv[0][1]), str(kv[0][2]), kv[0][3])):
        entry = {
            "mode": mode, "lambda": "" if lam is None else lam,
            "sigma": "" if sigma is None else sigma, "split": split,
            "n_seeds": len(recs),
            "overall_median": median(r["overall"] for r in recs),
        }
        for c in categories:
            vals = [r["per_category"].get(c) for r in recs if c in r["per_category"]]
            entry[f"{c}_median"] = median(vals) if vals else ""
        table_rows.append(entry)
    columns = ["mode", "lambda", "sigma", "split", "n_seeds", "overall_median"] + \
        [f"{c}_median" for c in categories]
    _write_plot_csv(dest / "tables" / "indomain_vs_ood.csv", table_rows, columns)

    strategy = [r for r in table_rows if r["mode"] in ("attreg", "end_to_end")
                and r["split"] == "test_ood"]
    if strategy:
        _write_plot_csv(dest / "tables" / "training_strategy.csv", strategy, columns)

    uniform = [r for r in table_rows if r["mode"] in ("pretrain", "uniform")]
    if any(r["mode"] == "uniform" for r in uniform):
        _write_plot_csv(dest / "tables" / "uniform_attention_ablation.csv", uniform, columns)

    lam_rows = [r for r in table_rows if r["mode"] == "attreg" and r["lambda"] != ""]
    if len({r["lambda"] for r in lam_rows}) > 1:
        _write_plot_csv(dest / "tables" / "lambda_sweep.csv", lam_rows, columns)

    sig_rows = [r for r in table_rows if r["mode"] == "attreg" and r["sigma"] != ""]
    if len({r["sigma"] for r in sig_rows}) > 1:
        _write_plot_csv(dest / "tables" / "sigma_sweep.csv", sig_rows, columns)

    if faith:
        _write_plot_csv(dest / "tables" / "faithfulness_correlations.csv", faith,
                        ["seed", "model", "source", "spearman_rank_tvd"])
    return dest
