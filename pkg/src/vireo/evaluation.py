"""Per-class IoU, seen/unseen mIoU reporting, and the evaluation runner.

Confusion matrices accumulate integer pixel counts (ground truth on rows,
predictions on columns); merging is plain addition so per-image matrices
can be computed in any order. Classes that never appear on either side
drop out of the mean instead of polluting it with zeros.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IGNORE_ID = 255

_LABEL_RE = re.compile(r"^[A-Za-z0-9_-]+$")


class ConfusionMatrix:
    def __init__(self, num_classes: int, ignore_id: int = IGNORE_ID):
        if num_classes < 1:
            raise ValueError("need at least one class")
        self.num_classes = num_classes
        self.ignore_id = ignore_id
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and truth {gt.shape} differ")
        valid = gt != self.ignore_id
        for name, arr in (("prediction", pred), ("truth", gt)):
            bad_mask = ((arr < 0) | (arr >= self.num_classes)) & valid
            if np.any(bad_mask):
                y, x = (int(v) for v in np.argwhere(bad_mask)[0])
                raise ValueError(f"{name} id {int(arr[y, x])} out of range "
                                 f"[0,{self.num_classes}) at pixel ({y}, {x})")
        flat = self.num_classes * gt[valid].astype(np.int64) + pred[valid].astype(np.int64)
        binned = np.bincount(flat, minlength=self.num_classes ** 2)
        self.counts += binned.reshape(self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("class counts differ")
        self.counts += other.counts
        return self

    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class IouResult:
    per_class: dict[int, float | None]
    mean: float | None

    def present_classes(self) -> list[int]:
        return [k for k, v in self.per_class.items() if v is not None]


def miou(cm: ConfusionMatrix, subset: set[int] | None = None) -> IouResult:
    """IoU per class and the mean over classes present in the counts.

    A class with an empty union (never predicted, never labeled) is absent:
    reported as None and excluded from the mean. ``subset`` restricts the
    mean to the listed class ids; an empty effective subset yields None.
    """
    diag = np.diag(cm.counts).astype(np.float64)
    rows = cm.counts.sum(axis=1).astype(np.float64)
    cols = cm.counts.sum(axis=0).astype(np.float64)
    union = rows + cols - diag
    per_class: dict[int, float | None] = {}
    for k in range(cm.num_classes):
        per_class[k] = None if union[k] == 0 else float(diag[k] / union[k])
    pool = [k for k in range(cm.num_classes)
            if (subset is None or k in subset) and per_class[k] is not None]
    mean = float(np.mean([per_class[k] for k in pool])) if pool else None
    return IouResult(per_class=per_class, mean=mean)


def brute_force_iou(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                    ignore_id: int = IGNORE_ID) -> dict[int, float | None]:
    """Set-arithmetic oracle: per-class intersection / union over raw maps."""
    out: dict[int, float | None] = {}
    valid = gt != ignore_id
    for k in range(num_classes):
        pred_k = (pred == k) & valid
        gt_k = (gt == k) & valid
        union = int(np.sum(pred_k | gt_k))
        out[k] = None if union == 0 else float(np.sum(pred_k & gt_k)) / union
    return out


# -- report emission ----------------------------------------------------------


def format_value(value: float | None) -> str:
    """Two decimals, rounding half away from zero; absent values are n/a."""
    if value is None:
        return "n/a"
    return f"{math.floor(abs(value) * 100 + 0.5) / 100 * (1 if value >= 0 else -1):.2f}"


def emit_report(results: dict[str, dict[str, float | None]]) -> tuple[str, str]:
    """Rows seen/unseen/mean vs condition columns; returns (csv, aligned text)."""
    conditions = list(results)
    for label in conditions:
        if not _LABEL_RE.match(label):
            raise ValueError(f"condition label {label!r} outside [A-Za-z0-9_-]")
    splits = ["seen", "unseen", "mean"]
    header = ["split"] + conditions
    table = [[split] + [format_value(results[c].get(split)) for c in conditions]
             for split in splits]

    csv_lines = [",".join(header)] + [",".join(row) for row in table]
    widths = [max(len(r[i]) for r in [header] + table) for i in range(len(header))]
    txt_lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths))
                 for row in [header] + table]
    return "\n".join(csv_lines) + "\n", "\n".join(txt_lines) + "\n"


def write_report(results: dict[str, dict[str, float | None]], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_text, txt_text = emit_report(results)
    csv_path = out_dir / "report.csv"
    txt_path = out_dir / "report.txt"
    csv_path.write_text(csv_text)
    txt_path.write_text(txt_text)
    return csv_path, txt_path


# -- evaluation runner ----------------------------------------------------------


@dataclass
class EvalOutcome:
    per_condition: dict[str, ConfusionMatrix]
    results: dict[str, dict[str, float | None]]
    predictions: dict[str, np.ndarray]
    spatial_weights: dict[str, np.ndarray]


def run_evaluation(model, task, bank, collect_attention: bool = False) -> EvalOutcome:
    """Evaluate on the task's eval split; seen/unseen follows the task's class lists."""
    k = bank.num_classes
    seen = {i for i, c in enumerate(bank.classes) if c in task.seen_classes}
    unseen = {i for i, c in enumerate(bank.classes) if c not in task.seen_classes}
    per_condition: dict[str, ConfusionMatrix] = {}
    predictions: dict[str, np.ndarray] = {}
    weights: dict[str, np.ndarray] = {}
    for item in task.eval_items:
        out = model.forward(task.stack(item.image_id), bank)
        pred_map = out.prediction.class_map()
        predictions[item.image_id] = pred_map
        if collect_attention and out.prior is not None:
            weights[item.image_id] = out.prior.spatial_weights.data.copy()
        labels = task.labels_for_bank(item.image_id, bank)
        cm = per_condition.setdefault(item.condition, ConfusionMatrix(k))
        cm.update(pred_map, labels)

    results: dict[str, dict[str, float | None]] = {}
    for condition, cm in per_condition.items():
        results[condition] = {
            "seen": miou(cm, subset=seen).mean,
            "unseen": miou(cm, subset=unseen).mean if unseen else None,
            "mean": miou(cm).mean,
        }
    return EvalOutcome(per_condition=per_condition, results=results,
                       predictions=predictions, spatial_weights=weights)


def write_eval_csv(rows: list[dict], path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
