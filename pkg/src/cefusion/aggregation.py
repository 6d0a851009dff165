"""Video-level aggregation and the sliding-window cross-model ensemble.

Ties are always broken towards the lowest class index.

Prediction files are tab-separated text with a header row.  Full files
carry per-frame model outputs::

    video_id  frame_idx  logit_0 .. logit_{K-1}  prob_0 .. prob_{K-1}  label

Label files (written by the ensemble) drop the float columns::

    video_id  frame_idx  label

Rows are grouped by video in file order, frames ascending from 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, CoverageError, FormatError

PROB_TOLERANCE = 1e-5


@dataclass
class FramePredictions:
    video_id: str
    labels: np.ndarray
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None

    @property
    def frames(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FramePredictions):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is b
            return a.shape == b.shape and np.array_equal(a, b)

        return (self.video_id == other.video_id and same(self.labels, other.labels)
                and same(self.logits, other.logits) and same(self.probs, other.probs))


def _first_argmax(counts: np.ndarray) -> int:
    return int(np.argmax(counts))  # numpy returns the first maximum


def _column_means(rows: np.ndarray) -> np.ndarray:
    # fsum is correctly rounded, so the means (and exact ties) do not depend on frame order
    return np.array([math.fsum(col) for col in rows.T]) / rows.shape[0]


def majority_vote(labels) -> int:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ContractError("majority_vote: no frames")
    if labels.min() < 0:
        raise ContractError("majority_vote: negative class index")
    return _first_argmax(np.bincount(labels))


def average_logits(logits) -> int:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ContractError(f"average_logits: expected non-empty T x K logits, got shape {logits.shape}")
    return _first_argmax(_column_means(logits))


def average_probs(probs) -> int:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ContractError(f"average_probs: expected non-empty T x K probabilities, got shape {probs.shape}")
    sums = probs.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > PROB_TOLERANCE)
    if bad.size:
        raise ContractError(f"average_probs: row {int(bad[0])} sums to {sums[bad[0]]:.8f}, not 1")
    return _first_argmax(_column_means(probs))


METHODS = {
    "vote": ("Majority voting", lambda fp: majority_vote(fp.labels)),
    "logits": ("Average logits", lambda fp: average_logits(fp.logits)),
    "probs": ("Average probabilities", lambda fp: average_probs(fp.probs)),
}


def aggregate(pred: FramePredictions, method: str) -> int:
    if method not in METHODS:
        raise ContractError(f"unknown aggregation method {method!r}; choose from {sorted(METHODS)}")
    if method == "logits" and pred.logits is None or method == "probs" and pred.probs is None:
        raise ContractError(f"{pred.video_id}: method {method!r} needs per-frame model outputs")
    return METHODS[method][1](pred)


def sliding_window_ensemble(inputs: Sequence, window: int = 10) -> np.ndarray:
    """Fuse per-frame labels from several models by a trailing-window vote.

    For frame ``t`` every model contributes its labels for frames
    ``max(0, t - window + 1) .. t``; the most frequent class in that pool
    wins.  ``inputs`` holds one label sequence (or :class:`FramePredictions`)
    per model.
    """
    if window < 1:
        raise ContractError(f"sliding_window_ensemble: window must be >= 1, got {window}")
    seqs = [np.asarray(x.labels if isinstance(x, FramePredictions) else x, dtype=np.int64) for x in inputs]
    if not seqs:
        raise ContractError("sliding_window_ensemble: needs at least one model")
    T = len(seqs[0])
    if any(len(s) != T for s in seqs):
        raise ContractError(f"sliding_window_ensemble: frame counts differ {[len(s) for s in seqs]}")
    if T == 0:
        return np.zeros(0, dtype=np.int64)
    K = int(max(s.max() for s in seqs)) + 1
    counts = np.zeros((T + 1, K), dtype=np.int64)
    for s in seqs:
        counts[np.arange(1, T + 1), s] += 1
    np.cumsum(counts, axis=0, out=counts)
    hi = np.arange(1, T + 1)
    lo = np.maximum(0, hi - window)
    pooled = counts[hi] - counts[lo]
    return np.argmax(pooled, axis=1).astype(np.int64)


# -- prediction files ------------------------------------------------------------

def _fmt(x: np.float32) -> str:
    # float32 -> float64 is exact and repr() round-trips float64, so parsing is lossless.
    return repr(float(np.float32(x)))


def write_predictions(preds: Sequence[FramePredictions], path) -> None:
    if not preds:
        raise ContractError("write_predictions: nothing to write")
    K = preds[0].logits.shape[1]
    header = (["video_id", "frame_idx"] + [f"logit_{k}" for k in range(K)]
              + [f"prob_{k}" for k in range(K)] + ["label"])
    lines = ["\t".join(header)]
    for fp in preds:
        if fp.logits is None or fp.probs is None or fp.logits.shape[1] != K:
            raise ContractError(f"{fp.video_id}: incomplete predictions for a {K}-class file")
        for t in range(fp.frames):
            row = [fp.video_id, str(t)]
            row += [_fmt(v) for v in fp.logits[t]]
            row += [_fmt(v) for v in fp.probs[t]]
            row.append(str(int(fp.labels[t])))
            lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_frame_label_file(labels: dict[str, np.ndarray], path) -> None:
    lines = ["video_id\tframe_idx\tlabel"]
    for vid, lab in labels.items():
        lines += [f"{vid}\t{t}\t{int(x)}" for t, x in enumerate(lab)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_video_label_file(labels: dict[str, int], path) -> None:
    lines = ["video_id\tlabel"] + [f"{vid}\t{int(x)}" for vid, x in labels.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_video_label_file(path) -> dict[str, int]:
    rows = Path(path).read_text().splitlines()
    if not rows or rows[0] != "video_id\tlabel":
        raise FormatError(f"{path}: not a video label file")
    return {vid: int(x) for vid, x in (r.split("\t") for r in rows[1:] if r)}


def read_predictions(path) -> dict[str, FramePredictions]:
    """Parse a full prediction file or a label file into per-video predictions."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"prediction file not found: {path}")
    rows = path.read_text().splitlines()
    if not rows:
        raise FormatError(f"{path}: empty prediction file")
    header = rows[0].split("\t")
    if header == ["video_id", "frame_idx", "label"]:
        K = None
    else:
        n_float = len(header) - 3
        if (len(header) < 5 or n_float % 2 or header[:2] != ["video_id", "frame_idx"]
                or header[-1] != "label"):
            raise FormatError(f"{path}: unrecognised header")
        K = n_float // 2

    grouped: dict[str, list[list[str]]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        cols = row.split("\t")
        if len(cols) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} columns, got {len(cols)}")
        frames = grouped.setdefault(cols[0], [])
        if int(cols[1]) != len(frames):
            raise FormatError(f"{path}:{lineno}: frame index {cols[1]} out of sequence for {cols[0]!r}")
        frames.append(cols)

    out = {}
    for vid, frames in grouped.items():
        labels = np.array([int(c[-1]) for c in frames], dtype=np.int64)
        if K is None:
            out[vid] = FramePredictions(vid, labels)
            continue
        floats = np.array([[float(v) for v in c[2:-1]] for c in frames], dtype=np.float32)
        out[vid] = FramePredictions(vid, labels, floats[:, :K].copy(), floats[:, K:].copy())
    return out


def check_same_coverage(runs: Sequence[dict[str, FramePredictions]]) -> None:
    """Every run must cover the same videos with the same frame counts."""
    ref = runs[0]
    for i, run in enumerate(runs[1:], start=1):
        if set(run) != set(ref):
            missing = sorted(set(ref) ^ set(run))
            raise CoverageError(f"prediction set {i} covers different videos: {missing[:10]}")
        for vid, fp in ref.items():
            if run[vid].frames != fp.frames:
                raise CoverageError(
                    f"video {vid!r}: {fp.frames} frames in set 0 but {run[vid].frames} in set {i}")
