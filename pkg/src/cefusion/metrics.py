"""Confusion matrices, per-class / macro / weighted F1 and report emission.

Macro F1 is the unweighted mean over *all* K classes.  A class that is
neither present nor predicted scores F1 = 0 and still counts in the mean.
All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .aggregation import METHODS, FramePredictions, aggregate
from .dataio import GoldLabels
from .errors import ContractError, CoverageError, DataError, LabelError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # K x K, rows = true class, cols = predicted

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricsReport:
    per_class_f1: np.ndarray
    macro_f1: float
    weighted_f1: float
    support: np.ndarray
    level: str
    method: str
    confusion: ConfusionMatrix | None = None

    def to_kv(self) -> str:
        lines = [f"level={self.level}", f"method={self.method}"]
        lines += [f"per_class_f1.{k}={v!r}" for k, v in enumerate(self.per_class_f1.tolist())]
        lines += [f"macro_f1={self.macro_f1!r}", f"weighted_f1={self.weighted_f1!r}"]
        return "\n".join(lines) + "\n"


def confusion(preds, golds, K: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    golds = np.asarray(golds, dtype=np.int64).reshape(-1)
    if preds.shape != golds.shape:
        raise ContractError(f"confusion: {preds.size} predictions for {golds.size} gold labels")
    for name, arr in (("prediction", preds), ("gold", golds)):
        bad = np.flatnonzero((arr < 0) | (arr >= K))
        if bad.size:
            i = int(bad[0])
            raise LabelError(f"confusion: {name} label {int(arr[i])} at index {i} outside [0, {K})")
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (golds, preds), 1)
    return ConfusionMatrix(counts)


def per_class_f1(cm: ConfusionMatrix) -> np.ndarray:
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    safe = np.where(denom > 0, denom, 1.0)
    return np.where(denom > 0, 2 * tp / safe, 0.0)


def macro_f1(cm: ConfusionMatrix) -> float:
    return math.fsum(per_class_f1(cm)) / cm.num_classes


def weighted_f1(cm: ConfusionMatrix) -> float:
    support = cm.counts.sum(axis=1)
    n = int(support.sum())
    if n == 0:
        raise ContractError("weighted_f1: no scored items")
    # dividing once at the end keeps perfect predictions at exactly 1.0
    return math.fsum(support * per_class_f1(cm)) / n


def report(cm: ConfusionMatrix, level: str = "frame", method: str = "argmax") -> MetricsReport:
    f1 = per_class_f1(cm)
    return MetricsReport(
        per_class_f1=f1,
        macro_f1=macro_f1(cm),
        weighted_f1=weighted_f1(cm),
        support=cm.counts.sum(axis=1),
        level=level,
        method=method,
        confusion=cm,
    )


def evaluate(
    predictions: Mapping[str, FramePredictions],
    gold: Mapping[str, GoldLabels],
    K: int,
    level: str = "frame",
    method: str = "vote",
) -> MetricsReport:
    """Score predictions against gold labels.

    ``level="frame"`` scores each frame's label (video labels are broadcast
    over the frames); ``level="video"`` first reduces each video to one label
    with the named aggregation ``method``.
    """
    if level not in ("frame", "video"):
        raise ContractError(f"unknown evaluation level {level!r}")
    missing = sorted(set(gold) - set(predictions))
    if missing:
        raise CoverageError(f"no predictions for {len(missing)} gold videos: {missing[:10]}")

    preds, golds = [], []
    for vid, g in gold.items():
        fp = predictions[vid]
        if level == "frame":
            if g.frame_labels is not None:
                if len(g.frame_labels) != fp.frames:
                    raise CoverageError(
                        f"video {vid!r}: {len(g.frame_labels)} gold frames but {fp.frames} predicted")
                gl = g.frame_labels
            elif g.label is not None:
                gl = np.full(fp.frames, g.label, dtype=np.int64)
            else:
                raise DataError(f"video {vid!r} has no gold label")
            preds.append(np.asarray(fp.labels, dtype=np.int64))
            golds.append(gl)
        else:
            if g.label is None:
                raise DataError(f"video {vid!r}: video-level scoring needs a video label")
            preds.append([aggregate(fp, method)])
            golds.append([g.label])

    cm = confusion(np.concatenate(preds) if preds else [], np.concatenate(golds) if golds else [], K)
    return report(cm, level, "argmax" if level == "frame" else method)


def evaluate_all_methods(predictions, gold, K: int) -> list[MetricsReport]:
    """Video-level reports for every aggregation method, in table order."""
    return [evaluate(predictions, gold, K, level="video", method=m) for m in METHODS]


def default_class_names(K: int) -> list[str]:
    prefix = "compound" if K == 7 else "class"
    return [f"{prefix}_{k}" for k in range(K)]


def format_table(reports: Sequence[MetricsReport], class_names: Sequence[str] | None = None) -> str:
    """Plain-text comparison table, one row per report (scores in percent)."""
    K = len(reports[0].per_class_f1)
    names = list(class_names) if class_names is not None else default_class_names(K)
    if len(names) != K:
        raise ContractError(f"{len(names)} class names for {K} classes")
    head = ["Prediction method", "Level", "Macro F1", "Weighted F1"] + [f"F1[{n}]" for n in names]
    rows = []
    for r in reports:
        label = METHODS[r.method][0] if r.method in METHODS else r.method
        rows.append([label, r.level, f"{100 * r.macro_f1:.2f}", f"{100 * r.weighted_f1:.2f}"]
                    + [f"{100 * v:.2f}" for v in r.per_class_f1])
    widths = [max(len(head[i]), *(len(row[i]) for row in rows)) for i in range(len(head))]

    def line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    return "\n".join([line(head), line(["-" * w for w in widths])] + [line(r) for r in rows]) + "\n"


def write_reports(reports: Sequence[MetricsReport], path, class_names=None) -> tuple[Path, Path]:
    """Write the table to ``path`` and key-value blocks to ``path`` with suffix ``.kv``."""
    path = Path(path)
    kv_path = path.with_suffix(".kv")
    path.write_text(format_table(reports, class_names))
    kv_path.write_text("\n".join(r.to_kv() for r in reports))
    return path, kv_path
