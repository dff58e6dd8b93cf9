"""Classification metrics, paired bootstrap significance and report aggregation."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DataError


@dataclass
class EvalReport:
    accuracy: float
    weighted_f1: float
    macro_f1: float
    per_class_f1: list[float]
    confusion: list[list[int]]
    n: int
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.per_class_f1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    yt = np.asarray(y_true, dtype=np.int64)
    yp = np.asarray(y_pred, dtype=np.int64)
    if yt.shape != yp.shape or yt.ndim != 1 or yt.size == 0:
        raise DataError(f"y_true and y_pred must be equal-length nonempty vectors, got {yt.shape} and {yp.shape}")
    for name, y in (("y_true", yt), ("y_pred", yp)):
        if y.min() < 0 or y.max() >= num_classes:
            raise DataError(f"{name} has labels outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (yt, yp), 1)
    return cm


def _safe_div(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a, dtype=np.float64)
    np.divide(a, b, out=out, where=b > 0)
    return out


def metrics(y_true, y_pred, num_classes: int) -> EvalReport:
    """Accuracy plus per-class, macro and support-weighted F1 (0/0 counts as 0)."""
    cm = confusion_matrix(y_true, y_pred, num_classes)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, support)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    n = int(cm.sum())
    return EvalReport(
        accuracy=float(tp.sum() / n),
        weighted_f1=float((f1 * support).sum() / n),
        macro_f1=float(f1.mean()),
        per_class_f1=[float(x) for x in f1],
        confusion=cm.tolist(),
        n=n,
        precision=[float(x) for x in precision],
        recall=[float(x) for x in recall],
    )


METRICS: dict[str, Callable[[EvalReport], float]] = {
    "macro_f1": lambda r: r.macro_f1,
    "weighted_f1": lambda r: r.weighted_f1,
    "accuracy": lambda r: r.accuracy,
}


@dataclass
class BootstrapResult:
    p_value: float
    significant: bool
    threshold: float
    observed_delta: float
    B: int


def paired_bootstrap(y_true, pred_a, pred_b, metric: str | Callable = "macro_f1", B: int = 1000,
                     alpha: float = 0.05, comparisons: int = 1, num_classes: int | None = None,
                     seed: int = 0) -> BootstrapResult:
    """One-sided paired bootstrap: is system A better than system B?

    ``p`` is the fraction of index resamples in which ``metric(A) <= metric(B)``;
    A is significantly better iff ``p < alpha / comparisons`` (Bonferroni).
    """
    yt = np.asarray(y_true, dtype=np.int64)
    pa = np.asarray(pred_a, dtype=np.int64)
    pb = np.asarray(pred_b, dtype=np.int64)
    if not (yt.shape == pa.shape == pb.shape) or yt.ndim != 1 or yt.size == 0:
        raise DataError("paired_bootstrap needs three equal-length nonempty label vectors")
    if B < 100:
        raise DataError(f"paired_bootstrap needs B >= 100 resamples, got {B}")
    if comparisons < 1:
        raise DataError("comparisons must be >= 1")
    C = num_classes or int(max(yt.max(), pa.max(), pb.max())) + 1
    score = _metric_fn(metric, C)
    rng = np.random.default_rng(seed)
    n = yt.size
    worse = 0
    for _ in range(B):
        idx = rng.integers(0, n, size=n)
        if score(yt[idx], pa[idx]) <= score(yt[idx], pb[idx]):
            worse += 1
    p = worse / B
    threshold = alpha / comparisons
    return BootstrapResult(p, p < threshold, threshold, score(yt, pa) - score(yt, pb), B)


def _metric_fn(metric, C):
    if callable(metric):
        return metric
    if metric not in METRICS:
        raise DataError(f"unknown metric {metric!r}; expected one of {sorted(METRICS)}")
    if metric == "accuracy":
        return lambda t, p: float(np.mean(t == p))
    pick = METRICS[metric]
    return lambda t, p: pick(metrics(t, p, C))


def dyad_average(reports: Sequence[EvalReport]) -> EvalReport:
    """Unweighted mean of every score across directions; confusions are summed."""
    if not reports:
        raise DataError("dyad_average needs at least one report")
    C = reports[0].num_classes
    if any(r.num_classes != C for r in reports):
        raise DataError("cannot average reports with different class counts")
    mean = lambda xs: float(np.mean(xs))  # noqa: E731
    return EvalReport(
        accuracy=mean([r.accuracy for r in reports]),
        weighted_f1=mean([r.weighted_f1 for r in reports]),
        macro_f1=mean([r.macro_f1 for r in reports]),
        per_class_f1=[mean([r.per_class_f1[c] for r in reports]) for c in range(C)],
        confusion=np.sum([np.asarray(r.confusion) for r in reports], axis=0).tolist(),
        n=int(sum(r.n for r in reports)),
        precision=[mean([r.precision[c] for r in reports]) for c in range(C)] if all(r.precision for r in reports) else [],
        recall=[mean([r.recall[c] for r in reports]) for c in range(C)] if all(r.recall for r in reports) else [],
    )


def summary_rows(rows: Sequence[tuple[str, EvalReport]], class_names: Sequence[str]) -> list[list[str]]:
    """Result rows in a results-table layout, plus a ``mean±std`` row when there are several."""
    header = ["run", "accuracy", "weighted_f1", "macro_f1"] + [f"f1_{c}" for c in class_names]
    table = [header]
    vals = []
    for name, r in rows:
        v = [r.accuracy, r.weighted_f1, r.macro_f1] + list(r.per_class_f1)
        vals.append(v)
        table.append([name] + [f"{x:.4f}" for x in v])
    if len(vals) > 1:
        arr = np.asarray(vals)
        mu, sd = arr.mean(axis=0), arr.std(axis=0)
        table.append(["mean±std"] + [f"{m:.4f}±{s:.4f}" for m, s in zip(mu, sd)])
    return table


def write_csv(path, table: list[list[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(table)
