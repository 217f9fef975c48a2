"""Confusion counts, overlap/rate metrics, ROC AUC and Table-style reporting."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

METRICS = ("dsc", "js", "precision", "recall", "sensitivity", "specificity", "accuracy", "auc")
HEADERS = ("DSC", "JS", "Precision", "Recall", "Sensitivity", "Specificity", "Accuracy", "AUC")
N_THRESHOLDS = 257


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        for k in ("tp", "tn", "fp", "fn"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


def _binary(a, what: str) -> np.ndarray:
    a = np.asarray(a)
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{what} must be binary")
    return a.astype(bool)


def confusion(pred_mask, gt_mask) -> ConfusionCounts:
    p, g = _binary(pred_mask, "pred_mask"), _binary(gt_mask, "gt_mask")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, p.size - tp - fp - fn, fp, fn)


def _ratio(num: int, den: int, empty_ok: bool) -> float:
    # den == 0: 1 when nothing was wrongly predicted on the other side, else 0
    if den == 0:
        return 1.0 if empty_ok else 0.0
    return num / den


def metrics_from_counts(c: ConfusionCounts) -> dict[str, float]:
    """DSC, JS, precision, recall, sensitivity, specificity, accuracy."""
    dsc = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, True)
    # DSC / (2 - DSC) reduces to TP / (TP + FP + FN); one rounding instead of two
    js = _ratio(c.tp, c.tp + c.fp + c.fn, True)
    recall = _ratio(c.tp, c.tp + c.fn, c.fp == 0)
    return {
        "dsc": dsc,
        "js": js,
        "precision": _ratio(c.tp, c.tp + c.fp, c.fn == 0),
        "recall": recall,
        "sensitivity": recall,
        "specificity": _ratio(c.tn, c.tn + c.fp, c.fn == 0),
        "accuracy": _ratio(c.tp + c.tn, c.total, True),
    }


def roc_points(probs, gt_mask, n_thresholds: int = N_THRESHOLDS) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) at thresholds 0, 1/(n-1), ..., 1, predicting positive when p >= thr."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    g = _binary(gt_mask, "gt_mask").ravel()
    if p.shape != g.shape:
        raise ValueError("probs and gt_mask differ in size")
    thresholds = np.arange(n_thresholds) / (n_thresholds - 1)
    pos, neg = np.sort(p[g]), np.sort(p[~g])
    # count of scores >= thr
    tp = pos.size - np.searchsorted(pos, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg, thresholds, side="left")
    tpr = tp / pos.size if pos.size else np.zeros(n_thresholds)
    fpr = fp / neg.size if neg.size else np.zeros(n_thresholds)
    return fpr, tpr


def auc(probs, gt_mask, *, with_flag: bool = False):
    """Trapezoidal ROC area over 257 fixed thresholds.

    A mask holding only one class has no ROC curve; the value 1.0 is returned
    and, with ``with_flag``, the degenerate flag is set.
    """
    g = _binary(gt_mask, "gt_mask")
    if np.asarray(probs).shape != g.shape:
        raise ValueError("probs and gt_mask differ in shape")
    n_pos = int(g.sum())
    if n_pos == 0 or n_pos == g.size:
        return (1.0, True) if with_flag else 1.0
    fpr, tpr = roc_points(probs, g)
    # thresholds ascend, so the curve runs from (1, 1) toward (0, 0); close it at the origin
    x = np.concatenate([[1.0], fpr, [0.0]])[::-1]
    y = np.concatenate([[1.0], tpr, [0.0]])[::-1]
    area = float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))
    return (area, False) if with_flag else area


def sample_metrics(probs, gt_mask, threshold: float = 0.5) -> dict[str, float]:
    """All eight metrics for one probability map against its mask."""
    pred = (np.asarray(probs) >= threshold).astype(np.uint8)
    row = metrics_from_counts(confusion(pred, gt_mask))
    row["auc"] = auc(probs, gt_mask)
    return row


@dataclass
class MetricsRow:
    mean: dict[str, float]
    std: dict[str, float]
    n: int

    def cell(self, key: str) -> str:
        return f"{self.mean[key]:.3f} ± {self.std[key]:.3f}"


def aggregate(rows: Sequence[Mapping[str, float]]) -> MetricsRow:
    """Per-metric mean and population standard deviation."""
    if not rows:
        raise ValueError("aggregate needs at least one row")
    keys = [k for k in METRICS if k in rows[0]]
    mean, std = {}, {}
    for k in keys:
        vals = np.array([r[k] for r in rows], dtype=np.float64)
        mean[k] = float(vals.mean())
        std[k] = float(vals.std())
    return MetricsRow(mean, std, len(rows))


def report_table(rows: Mapping[str, MetricsRow], params: Mapping[str, int] | None = None) -> tuple[str, str]:
    """Markdown table (3 decimals, mean ± std) and an exact-valued CSV."""
    if not rows:
        raise ValueError("report_table needs at least one model")
    head = ["Model", *HEADERS]
    if params is not None:
        head.append("Params")
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join("---" for _ in head) + "|"]
    for model, row in rows.items():
        cells = [model, *(row.cell(k) for k in METRICS)]
        if params is not None:
            cells.append(str(params[model]))
        lines.append("| " + " | ".join(cells) + " |")
    md = "\n".join(lines) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["model"]
    for k in METRICS:
        cols += [f"{k}_mean", f"{k}_std"]
    if params is not None:
        cols.append("params")
    w.writerow(cols)
    for model, row in rows.items():
        rec = [model]
        for k in METRICS:
            rec += [repr(row.mean[k]), repr(row.std[k])]
        if params is not None:
            rec.append(params[model])
        w.writerow(rec)
    return md, buf.getvalue()


def parse_table_csv(text: str) -> dict[str, MetricsRow]:
    out = {}
    for rec in csv.DictReader(io.StringIO(text)):
        mean = {k: float(rec[f"{k}_mean"]) for k in METRICS}
        std = {k: float(rec[f"{k}_std"]) for k in METRICS}
        out[rec["model"]] = MetricsRow(mean, std, 0)
    return out
