"""Plan-prediction metrics and per-horizon aggregation.

Every sample is a ``SequencePrediction``: for each of the H plan steps
(Start, Mid_1..Mid_h, Goal) a duplicate-free ranked list of label ids, plus
the ground-truth label ids. ``mid`` scope covers steps 1..H-2, ``full`` all H.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

METRICS = ("M@1", "M@5", "MSeq", "F@1", "F@5", "FSeq", "SR", "mid_mAcc", "full_mAcc", "mIoU", "edit")


@dataclass
class SequencePrediction:
    ranked: np.ndarray  # (H, k) label ids, best first
    gt: np.ndarray  # (H,)

    def __post_init__(self):
        self.ranked = np.asarray(self.ranked, dtype=int)
        self.gt = np.asarray(self.gt, dtype=int)
        if self.ranked.ndim != 2 or self.ranked.shape[0] != len(self.gt):
            raise ValueError(f"ranked {self.ranked.shape} inconsistent with {len(self.gt)} steps")
        if len(self.gt) < 3:
            raise ValueError("a plan has at least Start, one Mid and Goal")

    @property
    def horizon(self) -> int:
        return len(self.gt)

    def steps(self, scope: str) -> slice:
        if scope == "mid":
            return slice(1, self.horizon - 1)
        if scope == "full":
            return slice(0, self.horizon)
        raise ValueError(f"unknown scope {scope!r}")

    def top1(self) -> np.ndarray:
        return self.ranked[:, 0]


def step_recall_at_k(pred: SequencePrediction, k: int, scope: str = "mid") -> float:
    if k > pred.ranked.shape[1]:
        raise ValueError(f"k={k} exceeds rank-list length {pred.ranked.shape[1]}")
    s = pred.steps(scope)
    hits = (pred.ranked[s, :k] == pred.gt[s, None]).any(axis=1)
    return float(hits.mean())


def sequence_match(pred: SequencePrediction, scope: str = "mid") -> float:
    s = pred.steps(scope)
    return float(np.all(pred.ranked[s, 0] == pred.gt[s]))


def sequence_iou(pred_labels, gt_labels) -> float:
    a, b = set(np.asarray(pred_labels).tolist()), set(np.asarray(gt_labels).tolist())
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def sample_metrics(pred: SequencePrediction) -> dict[str, float]:
    k5 = min(5, pred.ranked.shape[1])
    m1 = step_recall_at_k(pred, 1, "mid")
    f1 = step_recall_at_k(pred, 1, "full")
    fseq = sequence_match(pred, "full")
    return {
        "M@1": m1,
        "M@5": step_recall_at_k(pred, k5, "mid"),
        "MSeq": sequence_match(pred, "mid"),
        "F@1": f1,
        "F@5": step_recall_at_k(pred, k5, "full"),
        "FSeq": fseq,
        "SR": fseq,
        "mid_mAcc": m1,
        "full_mAcc": f1,
        "mIoU": sequence_iou(pred.top1(), pred.gt),
        "edit": float(edit_distance(pred.top1(), pred.gt)),
    }


@dataclass
class EvalReport:
    """Per-horizon mean metrics plus a sample-weighted ``overall`` row."""

    method: str
    rows: dict  # horizon (int) or "overall" -> {"n": count, metric: value}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", "horizon", "metric", "value", "n"])
        for key, row in self.rows.items():
            for m in METRICS:
                writer.writerow([self.method, key, m, f"{row[m]:.6f}", row["n"]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_csv())

    def table(self, metrics=("M@1", "M@5", "MSeq", "F@1", "F@5", "FSeq", "mIoU", "edit")) -> str:
        head = f"{'H':>8} {'n':>6} " + " ".join(f"{m:>8}" for m in metrics)
        lines = [f"[{self.method}]", head]
        for key, row in self.rows.items():
            vals = " ".join(
                f"{row[m]:8.3f}" if m == "edit" else f"{100 * row[m]:8.2f}" for m in metrics
            )
            lines.append(f"{str(key):>8} {row['n']:>6} {vals}")
        return "\n".join(lines)


def aggregate(results, method: str = "") -> EvalReport:
    """``results`` is an iterable of (horizon, metrics-dict) pairs."""
    results = list(results)
    if not results:
        raise ValueError("no results to aggregate")
    by_h: dict[int, list[dict]] = {}
    for h, m in results:
        by_h.setdefault(int(h), []).append(m)
    rows = {}
    for h in sorted(by_h):
        items = by_h[h]
        rows[h] = {"n": len(items), **{m: float(np.mean([x[m] for x in items])) for m in METRICS}}
    total = sum(r["n"] for r in rows.values())
    rows["overall"] = {
        "n": total,
        **{m: sum(r[m] * r["n"] for r in rows.values()) / total for m in METRICS},
    }
    return EvalReport(method, rows)
