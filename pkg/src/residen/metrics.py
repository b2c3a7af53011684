"""Detection metrics, reports, and gradient-based attribution maps.

Per-unit accuracy counts both presence and absence as correct. F1 follows
the usual harmonic form with the degenerate cases pinned down: a unit with
no positives anywhere (no true positives, false positives or false
negatives) scores 1.0, and a unit where precision and recall are both zero
scores 0.0. The final score of a unit is the plain average of its accuracy
and F1; dataset-level numbers are unweighted means over units.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import LabelError, UndefinedMetricError, UsageError
from .layers import Ctx
from .ops import weighted_sum
from .tensor import Tape, Tensor, backward

# ---------------------------------------------------------------------------
# scalar metrics


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise UsageError("confusion counts cannot be negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _check_binary(arr: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise LabelError(f"{what} must be 0/1")
    return arr


def counts_from_predictions(pred: np.ndarray, truth: np.ndarray) -> List[ConfusionCounts]:
    """Per-unit confusion counts from [N, A] binary prediction/truth matrices."""
    pred = _check_binary(pred, "predictions")
    truth = _check_binary(truth, "labels")
    if pred.shape != truth.shape or pred.ndim != 2:
        raise UsageError(f"prediction/label shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.shape[0] == 0:
        raise UndefinedMetricError("metrics over zero samples are undefined")
    out = []
    for a in range(pred.shape[1]):
        p, t = pred[:, a], truth[:, a]
        out.append(ConfusionCounts(
            tp=int(((p == 1) & (t == 1)).sum()),
            fp=int(((p == 1) & (t == 0)).sum()),
            tn=int(((p == 0) & (t == 0)).sum()),
            fn=int(((p == 0) & (t == 1)).sum()),
        ))
    return out


def au_accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise UndefinedMetricError("accuracy over zero samples is undefined")
    return (c.tp + c.tn) / c.total


def precision(c: ConfusionCounts) -> float:
    if c.tp + c.fp == 0:
        return 1.0 if c.fn == 0 else 0.0
    return c.tp / (c.tp + c.fp)


def recall(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        return 1.0 if c.fp == 0 else 0.0
    return c.tp / (c.tp + c.fn)


def f1_score(c: ConfusionCounts) -> float:
    if c.tp + c.fp + c.fn == 0:
        return 1.0  # the unit never occurs and is never predicted
    p = precision(c)
    r = recall(c)
    if p + r == 0.0:
        return 0.0
    return 2.0 * p * r / (p + r)


def final_score(accuracy: float, f1: float) -> float:
    return (accuracy + f1) / 2.0


def mean_over_aus(values: Sequence[float]) -> float:
    if len(values) == 0:
        raise UndefinedMetricError("mean over zero units is undefined")
    return float(np.mean(values))


def cell_accuracy(counts: Sequence[ConfusionCounts]) -> float:
    """Correct cells over all (sample, unit) cells: the alternative aggregate
    to the default per-unit-then-mean accuracy."""
    total = sum(c.total for c in counts)
    if total == 0:
        raise UndefinedMetricError("accuracy over zero cells is undefined")
    return sum(c.tp + c.tn for c in counts) / total


def expression_accuracy(pred: Sequence[int], truth: Sequence[int]) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise UsageError(f"prediction/label shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise UndefinedMetricError("accuracy over zero samples is undefined")
    return float((pred == truth).mean())


def confusion_matrix(pred: Sequence[int], truth: Sequence[int], k: int) -> np.ndarray:
    """[k, k] counts, rows indexed by true class."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise UsageError("prediction/label shape mismatch")
    if pred.size and (min(pred.min(), truth.min()) < 0
                      or max(pred.max(), truth.max()) >= k):
        raise LabelError(f"class index outside 0..{k - 1}")
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (truth, pred), 1)
    return m


# ---------------------------------------------------------------------------
# report

REPORT_CSV_HEADER = ("au", "accuracy", "precision", "recall", "f1", "final_score")


@dataclass
class MetricsReport:
    au_ids: List[int]
    accuracy: List[float]
    precision: List[float]
    recall: List[float]
    f1: List[float]
    final_score: List[float]
    threshold: float
    num_samples: int
    dataset: str = ""
    checkpoint_id: str = ""
    dropped_aus: List[int] = field(default_factory=list)
    counts: List[Dict[str, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        n = len(self.au_ids)
        if n == 0:
            raise UndefinedMetricError("a report needs at least one unit")
        for name in ("accuracy", "precision", "recall", "f1", "final_score"):
            if len(getattr(self, name)) != n:
                raise UsageError(f"report column {name} has the wrong length")

    @property
    def mean_accuracy(self) -> float:
        return mean_over_aus(self.accuracy)

    @property
    def mean_precision(self) -> float:
        return mean_over_aus(self.precision)

    @property
    def mean_recall(self) -> float:
        return mean_over_aus(self.recall)

    @property
    def mean_f1(self) -> float:
        return mean_over_aus(self.f1)

    @property
    def mean_final_score(self) -> float:
        return mean_over_aus(self.final_score)

    def cell_accuracy(self) -> Optional[float]:
        """Cell-level aggregate accuracy; None when raw counts were not kept."""
        if not self.counts:
            return None
        return cell_accuracy([ConfusionCounts(**c) for c in self.counts])

    def to_dict(self) -> dict:
        return {
            "au_ids": list(self.au_ids),
            "accuracy": list(self.accuracy),
            "precision": list(self.precision),
            "recall": list(self.recall),
            "f1": list(self.f1),
            "final_score": list(self.final_score),
            "mean": {
                "accuracy": self.mean_accuracy,
                "precision": self.mean_precision,
                "recall": self.mean_recall,
                "f1": self.mean_f1,
                "final_score": self.mean_final_score,
            },
            "threshold": self.threshold,
            "num_samples": self.num_samples,
            "dataset": self.dataset,
            "checkpoint_id": self.checkpoint_id,
            "dropped_aus": list(self.dropped_aus),
            "counts": list(self.counts),
            "cell_accuracy": self.cell_accuracy(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            au_ids=[int(a) for a in d["au_ids"]],
            accuracy=[float(v) for v in d["accuracy"]],
            precision=[float(v) for v in d["precision"]],
            recall=[float(v) for v in d["recall"]],
            f1=[float(v) for v in d["f1"]],
            final_score=[float(v) for v in d["final_score"]],
            threshold=float(d["threshold"]),
            num_samples=int(d["num_samples"]),
            dataset=d.get("dataset", ""),
            checkpoint_id=d.get("checkpoint_id", ""),
            dropped_aus=[int(a) for a in d.get("dropped_aus", [])],
            counts=list(d.get("counts", [])),
        )


def report_from_counts(au_ids: Sequence[int], counts: Sequence[ConfusionCounts],
                       threshold: float, num_samples: int, dataset: str = "",
                       checkpoint_id: str = "",
                       dropped_aus: Sequence[int] = ()) -> MetricsReport:
    if len(au_ids) != len(counts):
        raise UsageError("one confusion count per unit is required")
    acc = [au_accuracy(c) for c in counts]
    f1s = [f1_score(c) for c in counts]
    return MetricsReport(
        au_ids=list(au_ids),
        accuracy=acc,
        precision=[precision(c) for c in counts],
        recall=[recall(c) for c in counts],
        f1=f1s,
        final_score=[final_score(a, f) for a, f in zip(acc, f1s)],
        threshold=threshold,
        num_samples=num_samples,
        dataset=dataset,
        checkpoint_id=checkpoint_id,
        dropped_aus=list(dropped_aus),
        counts=[{"tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn} for c in counts],
    )


def write_report_json(report: MetricsReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report_json(path: str) -> MetricsReport:
    with open(path, "r", encoding="utf-8") as fh:
        return MetricsReport.from_dict(json.load(fh))


def write_report_csv(report: MetricsReport, path: str) -> None:
    """One row per unit plus a trailing mean row; full float precision."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_CSV_HEADER)
        for i, au in enumerate(report.au_ids):
            writer.writerow([au, repr(report.accuracy[i]), repr(report.precision[i]),
                             repr(report.recall[i]), repr(report.f1[i]),
                             repr(report.final_score[i])])
        writer.writerow(["mean", repr(report.mean_accuracy), repr(report.mean_precision),
                         repr(report.mean_recall), repr(report.mean_f1),
                         repr(report.mean_final_score)])


def read_report_csv(path: str) -> Dict[str, Dict[str, float]]:
    """Rows keyed by the unit column; values keyed by metric name."""
    out: Dict[str, Dict[str, float]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != REPORT_CSV_HEADER:
            raise UsageError(f"unexpected report header {header}")
        for row in reader:
            out[row[0]] = {name: float(v) for name, v in zip(header[1:], row[1:])}
    return out


# ---------------------------------------------------------------------------
# attribution maps


def _single_image(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise UsageError(f"attribution maps take one image, got shape {arr.shape}")
    return arr.astype(np.float32, copy=True)


def _pick_logit(model, xt: Tensor, au_index: int, capture: Optional[dict]):
    ctx = Ctx("eval", 0, capture)
    logits = model.forward_logits(xt, ctx)
    n_units = logits.shape[1]
    if not 0 <= au_index < n_units:
        raise UsageError(f"unit index {au_index} outside 0..{n_units - 1}")
    onehot = np.zeros((1, n_units), dtype=np.float64)
    onehot[0, au_index] = 1.0
    return weighted_sum(logits, onehot)


def _normalize01(m: np.ndarray) -> np.ndarray:
    m = m.astype(np.float32)
    top = float(m.max())
    return m / top if top > 0 else m


def saliency_map(model, x, au_index: int) -> np.ndarray:
    """|d logit / d pixel|, max over channels, normalized to [0, 1]."""
    arr = _single_image(x)
    xt = Tensor(arr, requires_grad=True)
    tape = Tape()
    with tape:
        picked = _pick_logit(model, xt, au_index, capture=None)
    backward(tape, picked)
    g = np.abs(xt.grad[0]).max(axis=0)
    return _normalize01(g)


def _bilinear_upsample(m: np.ndarray, hw: int) -> np.ndarray:
    im = Image.fromarray(m.astype(np.float32), mode="F")
    return np.asarray(im.resize((hw, hw), Image.BILINEAR))


def class_activation_map(model, x, au_index: int) -> np.ndarray:
    """Gradient-weighted activation map over the final conv grid.

    Channel weights are the spatial means of the logit gradient; the weighted
    sum is passed through swish and clamped at zero (so the map is
    non-negative and small negative evidence is squashed rather than kept),
    then upsampled to input resolution and normalized to [0, 1].
    """
    arr = _single_image(x)
    xt = Tensor(arr, requires_grad=True)
    capture: dict = {}
    tape = Tape()
    with tape:
        picked = _pick_logit(model, xt, au_index, capture)
    backward(tape, picked)
    act = capture.get("last_conv")
    if act is None or act.grad is None:
        raise UsageError("model did not expose a final conv activation to map")
    w = act.grad.mean(axis=(2, 3))[0]  # [C]
    raw = np.einsum("c,chw->hw", w, act.data[0])
    sw = raw / (1.0 + np.exp(-np.clip(raw, -60, 60)))
    m = np.maximum(sw, 0.0)
    up = _bilinear_upsample(m, arr.shape[-1])
    return _normalize01(np.maximum(up, 0.0))
