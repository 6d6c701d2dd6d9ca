"""Consensus accuracy scoring and per-category metric records."""

from __future__ import annotations

from dataclasses import dataclass

from .data import DatasetSplit


def accuracy(answer: str, answers: list[str]) -> float:
    """min(1, #annotators giving the answer / 3)."""
    return min(1.0, answers.count(answer) / 3.0)


@dataclass
class MetricsRecord:
    split: str
    overall: float
    per_category: dict[str, float]
    n_per_category: dict[str, int]

    @property
    def n(self) -> int:
        return sum(self.n_per_category.values())

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "overall": self.overall,
            "per_category": dict(sorted(self.per_category.items())),
            "n_per_category": dict(sorted(self.n_per_category.items())),
        }

    @staticmethod
    def from_dict(d: dict) -> "MetricsRecord":
        return MetricsRecord(d["split"], d["overall"], dict(d["per_category"]),
                             dict(d["n_per_category"]))


def score_predictions(split: DatasetSplit, predicted: list[str]) -> MetricsRecord:
    """Score one prediction per instance; overall is the category-weighted mean."""
    if len(predicted) != len(split.instances):
        raise ValueError(f"{len(predicted)} predictions for {len(split.instances)} instances")
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for (_, qa), ans in zip(split.instances, predicted):
        sums[qa.question_category] = sums.get(qa.question_category, 0.0) + accuracy(ans, qa.answers)
        counts[qa.question_category] = counts.get(qa.question_category, 0) + 1
    total_n = sum(counts.values())
    overall = sum(sums.values()) / total_n if total_n else 0.0
    per_category = {c: sums[c] / counts[c] for c in counts}
    return MetricsRecord(split.name, overall, per_category, counts)
