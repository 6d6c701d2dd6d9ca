"""Faithfulness probes for grounding signals.

Three grounding sources are compared: the model's attention weights, a
gradient-times-feature saliency score, and a uniform control. The probes are
occlusion-based: keep only detections inside a percentile interval of the
source's ranking and measure accuracy, or remove one detection at a time and
measure the total variation distance between the score vectors before and
after. All probes re-run the full forward pass on the masked scene and leave
model parameters untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attreg import RegConfig, identify_key_objects, locate_ignored
from .data import DatasetSplit, EmbeddingTable, QAInstance, Scene, soft_targets
from .metrics import accuracy
from .model import Batch, VqaModel

GROUNDING_SOURCES = ("attention", "gradient", "uniform")

_EVAL_BATCH = 256


@dataclass
class SweepResult:
    lo: float
    hi: float
    accuracy: float
    n: int


@dataclass
class TVDRecord:
    rank: int
    mean_tvd: float


def tvd(p1, p2) -> float:
    """Total variation distance: half the L1 distance between score vectors."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    if p1.shape != p2.shape:
        raise ValueError(f"tvd: shapes {p1.shape} and {p2.shape} differ")
    return 0.5 * float(np.abs(p1 - p2).sum())


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties; 0 when either is constant."""
    rx = _average_ranks(np.asarray(x, dtype=np.float64))
    ry = _average_ranks(np.asarray(y, dtype=np.float64))
    sx, sy = rx.std(), ry.std()
    if sx == 0.0 or sy == 0.0:
        return 0.0
    return float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))


# ---------------------------------------------------------------------------
# grounding sources


def gradient_saliency(model: VqaModel, scene: Scene, qa: QAInstance) -> np.ndarray:
    """Per-detection relu(<d(sum of ground-truth logits)/d v_i, v_i>).

    The ground-truth answer set is every answer with a nonzero soft target.
    Masked detections score exactly 0.
    """
    batch = model.encode_batch([(scene, qa)], with_targets=False)
    gt = soft_targets(qa.answers, model.config.answer_vocab) > 0
    return _gradient_saliency_batch(model, batch, gt[None, :])[0]


def _gradient_saliency_batch(model: VqaModel, batch: Batch,
                             gt_mask: np.ndarray) -> np.ndarray:
    feats = ad.Tensor(batch.features, requires_grad=True)
    with ad.Tape():
        fwd = model.forward(batch, features=feats)
        objective = ad.tsum(fwd.logits * ad.Tensor(gt_mask.astype(np.float64)))
        ad.backward(objective)
    grad = feats.grad if feats.grad is not None else np.zeros_like(batch.features)
    for p in model.params.values():
        p.grad = None
    return np.maximum((grad * batch.features).sum(axis=2), 0.0)


def _grounding_weights(model: VqaModel, batch: Batch, source: str) -> np.ndarray:
    if source == "attention":
        return model.forward(batch).alpha.values
    if source == "uniform":
        return batch.active / batch.active.sum(axis=1, keepdims=True)
    if source == "gradient":
        gt = np.stack([
            pair_targets > 0 for pair_targets in batch.targets
        ]) if batch.targets is not None else None
        if gt is None:
            raise ValueError("gradient source needs targets in the batch")
        return _gradient_saliency_batch(model, batch, gt)
    raise ValueError(f"unknown grounding source {source!r}; expected one of {GROUNDING_SOURCES}")


def _rank_order(weights: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Positions of the active detections, best-ranked first, ties by id."""
    positions = np.flatnonzero(active)
    order = np.lexsort((positions, -weights[positions]))
    return positions[order]


def _batches(split: DatasetSplit):
    for lo in range(0, len(split.instances), _EVAL_BATCH):
        yield split.instances[lo : lo + _EVAL_BATCH]


# ---------------------------------------------------------------------------
# probes


def keep_interval_eval(model: VqaModel, split: DatasetSplit,
                       interval: tuple[float, float], source: str) -> SweepResult:
    """Accuracy when only detections inside a percentile interval are kept.

    A detection at rank i of K_active occupies the percentile 100*i/K_active;
    kept are those with lo < 100*i/K_active <= hi. When the interval catches
    no detection for some scene, the single detection at rank
    floor(lo*K_active/100)+1 is kept instead.
    """
    lo, hi = float(interval[0]), float(interval[1])
    if not (0.0 <= lo < hi <= 100.0):
        raise ValueError(f"interval must satisfy 0 <= lo < hi <= 100, got {interval}")
    vocab = model.config.answer_vocab
    total, n = 0.0, 0
    for pairs in _batches(split):
        batch = model.encode_batch(pairs)
        weights = _grounding_weights(model, batch, source)
        kept_active = np.zeros_like(batch.active)
        for j in range(len(pairs)):
            ranked = _rank_order(weights[j], batch.active[j])
            k_active = len(ranked)
            pct = 100.0 * (np.arange(k_active) + 1) / k_active
            inside = (pct > lo) & (pct <= hi)
            if not inside.any():
                fallback = min(int(lo * k_active / 100.0), k_active - 1)
                inside[fallback] = True
            kept_active[j, ranked[inside]] = True
        probs = _forward_probs(model, batch, kept_active)
        for j, (_, qa) in enumerate(pairs):
            total += accuracy(vocab[int(probs[j].argmax())], qa.answers)
            n += 1
    return SweepResult(lo, hi, total / n if n else 0.0, n)


def _forward_probs(model: VqaModel, batch: Batch, active: np.ndarray) -> np.ndarray:
    fwd = model.forward(batch, active=active)
    return ad.sigmoid_array(fwd.logits.values)


def region_tvd_curve(model: VqaModel, split: DatasetSplit, source: str) -> list[TVDRecord]:
    """Mean TVD between full-scene scores and scores with the rank-r detection
    removed, for every rank r of the grounding source.
    """
    K = split.k_objects
    sums = np.zeros(K)
    counts = np.zeros(K, dtype=np.int64)
    for pairs in _batches(split):
        batch = model.encode_batch(pairs)
        weights = _grounding_weights(model, batch, source)
        base = _forward_probs(model, batch, batch.active)
        ranked_rows = [_rank_order(weights[j], batch.active[j]) for j in range(len(pairs))]
        for r in range(K):
            rows = [j for j, ranked in enumerate(ranked_rows) if r < len(ranked)]
            if not rows:
                continue
            active = batch.active.copy()
            for j in rows:
                active[j, ranked_rows[j][r]] = False
            probs = _forward_probs(model, batch, active)
            for j in rows:
                sums[r] += tvd(base[j], probs[j])
                counts[r] += 1
    return [TVDRecord(rank=r + 1, mean_tvd=float(sums[r] / counts[r]) if counts[r] else 0.0)
            for r in range(K)]


def ignored_key_count(model: VqaModel, split: DatasetSplit, reg: RegConfig) -> float:
    """Mean |key objects ∩ ignored objects| under the model's attention."""
    table = EmbeddingTable()
    total = 0
    for pairs in _batches(split):
        batch = model.encode_batch(pairs, with_targets=False)
        alpha = model.forward(batch).alpha.values
        for j, (scene, qa) in enumerate(pairs):
            key = identify_key_objects(scene, qa.nouns, table, reg.sigma, reg.top_m)
            ids = np.array([d.id for d in scene.detections])
            ignored = locate_ignored(alpha[j], batch.active[j], reg.ignored_pct, ids=ids)
            total += len({i for i, _ in key} & set(ignored))
    return total / len(split.instances)
