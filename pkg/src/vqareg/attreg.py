"""Curated-sample attention regularization.

For each training sample the regularizer (i) scores detections against the
question nouns by embedding similarity and keeps the top-M above a threshold
as key objects, (ii) takes the detections whose attention weight ranks in the
bottom N% as ignored, and (iii) when the two sets intersect, trains on an
extra copy of the sample with those detections masked out and an all-zero
answer target. Fine-tuning on the combined loss pushes attention onto key
objects the backbone had been ignoring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .data import DatasetSplit, EmbeddingTable, QAInstance, Scene
from .model import VqaModel

TRAIN_MODES = ("plain", "attreg", "random_mask")


@dataclass
class RegConfig:
    sigma: float = 0.6
    top_m: int = 3
    ignored_pct: float = 40.0
    lam: float = 1.0
    start_epoch: int = 0
    recompute_attention: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError(f"sigma must lie in [0, 1], got {self.sigma}")
        if self.top_m < 1:
            raise ValueError(f"top_m must be >= 1, got {self.top_m}")
        if not 0.0 < self.ignored_pct <= 100.0:
            raise ValueError(f"ignored_pct must lie in (0, 100], got {self.ignored_pct}")
        if self.lam < 0.0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.start_epoch < 0:
            raise ValueError(f"start_epoch must be >= 0, got {self.start_epoch}")


@dataclass
class KeyObjectReport:
    key: list[tuple[int, float]]   # (detection id, similarity), best first
    ignored: list[int]
    masked: list[int]              # key ids that are also ignored

    @property
    def key_ids(self) -> list[int]:
        return [i for i, _ in self.key]


@dataclass
class CuratedSample:
    scene: Scene                   # masked copy; surviving features untouched
    question_tokens: list[str]
    target: np.ndarray             # all zeros, length |answer vocab|


@dataclass
class EpochStats:
    epoch: int
    mean_ignored_key_count: float
    loss_vqa: float
    loss_reg: float
    n_curated: int = 0
    n_skipped_empty: int = 0


def identify_key_objects(scene: Scene, nouns: list[str], table: EmbeddingTable,
                         sigma: float, top_m: int) -> list[tuple[int, float]]:
    """Active detections whose best noun similarity reaches sigma, best first.

    Ties are broken by ascending id; at most top_m entries. The comparison is
    >= sigma so that sigma=1.0 keeps exact category/noun matches.
    """
    if not nouns:
        return []
    scored = []
    for d in scene.detections:
        if not d.active:
            continue
        score = max(table.cosine(d.category, noun) for noun in nouns)
        if score >= sigma:
            scored.append((d.id, score))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:top_m]


def locate_ignored(alpha: np.ndarray, active: np.ndarray, ignored_pct: float,
                   ids: list[int] | None = None) -> list[int]:
    """Ids of the bottom floor(K_active * N / 100) detections by attention.

    Ranking is by weight descending with ties broken by ascending id, so the
    result depends only on attention ranks.
    """
    alpha = np.asarray(alpha)
    active = np.asarray(active, dtype=bool)
    positions = np.flatnonzero(active)
    if ids is None:
        id_arr = positions
    else:
        id_arr = np.asarray(ids)[positions]
    order = np.lexsort((id_arr, -alpha[positions]))
    n = math.floor(len(positions) * ignored_pct / 100.0)
    if n == 0:
        return []
    return [int(i) for i in id_arr[order[len(positions) - n:]]]


def curate(scene: Scene, qa: QAInstance, key, ignored_ids: list[int],
           n_answers: int) -> tuple[CuratedSample | None, KeyObjectReport]:
    """Mask the ignored key objects and pair the question with a zero target.

    ``key`` is either a list of ids or the (id, score) pairs produced by
    identify_key_objects. Returns no sample when the intersection is empty, or
    when masking would leave the scene without active detections (the caller
    counts the latter).
    """
    key_pairs = [t if isinstance(t, tuple) else (t, 1.0) for t in key]
    key_ids = [i for i, _ in key_pairs]
    masked = sorted(set(key_ids) & set(ignored_ids))
    report = KeyObjectReport(key=key_pairs, ignored=list(ignored_ids), masked=masked)
    if not masked:
        return None, report
    scene_m = scene.masked_copy(set(masked))
    if not scene_m.active_ids():
        return None, report
    return CuratedSample(scene_m, list(qa.question_tokens), np.zeros(n_answers)), report


def combined_loss(loss_vqa, loss_reg, lam: float) -> Tensor:
    """Weighted sum loss_vqa + lam * loss_reg; loss_reg may be absent."""
    loss_vqa = ad.as_tensor(loss_vqa)
    if loss_reg is None:
        return loss_vqa
    return ad.add(loss_vqa, ad.scale(ad.as_tensor(loss_reg), lam))


def finetune_with_attreg(model: VqaModel, split: DatasetSplit, reg: RegConfig, *,
                         epochs: int, lr: float, batch_size: int = 64, seed: int = 0,
                         mode: str = "attreg") -> list[EpochStats]:
    """Fine-tune the model in place, curating samples from its own attention.

    ``mode`` picks what trains on the curated loss: "attreg" masks ignored key
    objects, "random_mask" masks a random active subset of the same size (the
    control), and "plain" trains on the task loss only. The ignored-key-object
    count is logged every epoch in all modes, using the same reg parameters.
    """
    if mode not in TRAIN_MODES:
        raise ValueError(f"mode must be one of {TRAIN_MODES}, got {mode!r}")
    table = EmbeddingTable()
    pairs = split.instances
    key_cache = [
        identify_key_objects(scene, qa.nouns, table, reg.sigma, reg.top_m)
        for scene, qa in pairs
    ]
    ids_cache = [np.array([d.id for d in scene.detections]) for scene, _ in pairs]
    full = model.encode_batch(pairs)
    frozen = model.clone() if not reg.recompute_attention else None
    optimizer = Adam(model.params, lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    n_answers = len(model.config.answer_vocab)
    stats: list[EpochStats] = []

    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        reg_on = mode != "plain" and epoch >= reg.start_epoch
        count_sum = 0.0
        vqa_sum = 0.0
        reg_sum = 0.0
        n_steps = 0
        n_reg_steps = 0
        n_curated = 0
        n_skipped = 0
        for lo in range(0, len(order), batch_size):
            idx = order[lo : lo + batch_size]
            batch = full.subset(idx)
            if frozen is not None:
                alpha_src = frozen.forward(batch).alpha.values
            with ad.Tape():
                fwd = model.forward(batch)
                loss_vqa = model.batch_loss(fwd, batch.targets)
                if frozen is None:
                    alpha_src = fwd.alpha.values
                curated_rows: list[int] = []
                curated_active: list[np.ndarray] = []
                for j, bench_i in enumerate(idx):
                    scene, qa = pairs[bench_i]
                    det_ids = ids_cache[bench_i]
                    ignored = locate_ignored(alpha_src[j], batch.active[j],
                                             reg.ignored_pct, ids=det_ids)
                    sample, report = curate(scene, qa, key_cache[bench_i], ignored, n_answers)
                    count_sum += len(report.masked)
                    if not reg_on or not report.masked:
                        continue
                    if sample is None:
                        n_skipped += 1
                        continue
                    if mode == "random_mask":
                        active_ids = det_ids[batch.active[j]]
                        if len(report.masked) >= len(active_ids):
                            n_skipped += 1
                            continue
                        masked = rng.choice(active_ids, size=len(report.masked), replace=False)
                    else:
                        masked = report.masked
                    row = batch.active[j] & ~np.isin(det_ids, masked)
                    curated_rows.append(j)
                    curated_active.append(row)
                loss_reg = None
                if curated_rows:
                    q_sel = ad.take_rows(fwd.q, curated_rows)
                    feats_sel = Tensor(batch.features[curated_rows])
                    act_sel = np.stack(curated_active)
                    _, alpha_m = model.attend(feats_sel, act_sel, q_sel)
                    fused_m = model.fuse(feats_sel, alpha_m)
                    logits_m = model.predict(fused_m, q_sel)
                    zeros = np.zeros((len(curated_rows), n_answers))
                    elem = ad.bce_with_logits(logits_m, Tensor(zeros))
                    loss_reg = ad.scale(ad.tsum(elem), 1.0 / len(curated_rows))
                    n_curated += len(curated_rows)
                loss_all = combined_loss(loss_vqa, loss_reg, reg.lam)
                ad.backward(loss_all)
            if not np.isfinite(loss_all.values):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, step {n_steps} (mode={mode})")
            optimizer.step()
            optimizer.zero_grad()
            vqa_sum += float(loss_vqa.values)
            if loss_reg is not None:
                reg_sum += float(loss_reg.values)
                n_reg_steps += 1
            n_steps += 1
        stats.append(EpochStats(
            epoch=epoch,
            mean_ignored_key_count=count_sum / len(pairs),
            loss_vqa=vqa_sum / max(n_steps, 1),
            loss_reg=reg_sum / max(n_reg_steps, 1) if n_reg_steps else 0.0,
            n_curated=n_curated,
            n_skipped_empty=n_skipped,
        ))
    return stats


def write_stats_csv(path, stats: list[EpochStats]) -> None:
    import csv
    from pathlib import Path

    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_ignored_key_count", "loss_vqa", "loss_reg"])
        for row in stats:
            writer.writerow([row.epoch, repr(row.mean_ignored_key_count),
                             repr(row.loss_vqa), repr(row.loss_reg)])
