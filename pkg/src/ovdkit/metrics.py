"""Average-precision machinery and the evaluation report container."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def ap_101(scores: np.ndarray, is_positive: np.ndarray, num_positives: int) -> float:
    """Average precision with 101-point interpolation (COCO convention).

    scores/is_positive describe every prediction for one class; ranking
    is by descending score with ties broken by input order.
    """
    if num_positives == 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = is_positive[order].astype(np.float64)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / num_positives
    precision = cum_tp / (cum_tp + cum_fp)
    # precision envelope: max precision at recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    interp = np.zeros_like(RECALL_POINTS)
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    valid = idx < len(env)
    interp[valid] = env[idx[valid]]
    return float(interp.mean())


@dataclass
class EvalReport:
    """Per-class AP50 plus base/novel/all group means."""

    protocol: str
    per_class_ap: dict[str, float]
    novel_classes: list[str]
    gt_counts: dict[str, int] = field(default_factory=dict)
    prediction_count: int = 0

    def _group(self, names: list[str]) -> float:
        vals = [
            self.per_class_ap[n]
            for n in names
            if n in self.per_class_ap and not np.isnan(self.per_class_ap[n])
        ]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def novel_ap(self) -> float:
        return self._group([n for n in self.per_class_ap if n in self.novel_classes])

    @property
    def base_ap(self) -> float:
        return self._group([n for n in self.per_class_ap if n not in self.novel_classes])

    @property
    def all_ap(self) -> float:
        return self._group(list(self.per_class_ap))

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "per_class_ap": self.per_class_ap,
            "novel_classes": self.novel_classes,
            "gt_counts": self.gt_counts,
            "prediction_count": self.prediction_count,
            "novel_ap": self.novel_ap,
            "base_ap": self.base_ap,
            "all_ap": self.all_ap,
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, allow_nan=True))

    def summary(self) -> str:
        lines = [
            f"protocol: {self.protocol}",
            f"classes evaluated: {len(self.per_class_ap)}  predictions: {self.prediction_count}",
            f"AP50 novel {self.novel_ap:.4f} | base {self.base_ap:.4f} | all {self.all_ap:.4f}",
        ]
        for name in sorted(self.per_class_ap):
            tag = "novel" if name in self.novel_classes else "base"
            lines.append(
                f"  {name:<16} {tag:<5} AP50 {self.per_class_ap[name]:.4f}"
                f"  ({self.gt_counts.get(name, 0)} gts)"
            )
        return "\n".join(lines)
