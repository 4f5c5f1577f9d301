"""Regression metrics for age estimates (population, 1/N conventions).

``predictions`` are model outputs and ``targets`` are actual ages.  R² is
the coefficient of determination computed against the variance of the
actual ages; it is never clamped and goes negative for models worse than
predicting the mean.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyBatch, ShapeMismatch, ZeroVariance


@dataclass(frozen=True)
class EvaluationBatch:
    predictions: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.predictions, dtype=np.float64).reshape(-1)
        t = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if p.shape != t.shape:
            raise ShapeMismatch(f"{p.size} predictions vs {t.size} targets")
        if p.size == 0:
            raise EmptyBatch("evaluation batch is empty")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
            raise ValueError("evaluation batch contains non-finite values")
        object.__setattr__(self, "predictions", p)
        object.__setattr__(self, "targets", t)

    @property
    def n(self) -> int:
        return int(self.targets.size)

    @property
    def target_mean(self) -> float:
        return float(self.targets.mean())


def _batch(batch_or_preds, targets=None) -> EvaluationBatch:
    if isinstance(batch_or_preds, EvaluationBatch):
        return batch_or_preds
    return EvaluationBatch(batch_or_preds, targets)


def compute_mse(batch, targets=None) -> float:
    b = _batch(batch, targets)
    return float(np.mean((b.predictions - b.targets) ** 2))


def compute_rmse(batch, targets=None) -> float:
    return math.sqrt(compute_mse(batch, targets))


def compute_mae(batch, targets=None) -> float:
    b = _batch(batch, targets)
    return float(np.mean(np.abs(b.predictions - b.targets)))


def compute_r2(batch, targets=None) -> float:
    b = _batch(batch, targets)
    ss_tot = float(np.sum((b.targets - b.target_mean) ** 2))
    if ss_tot == 0.0 or np.all(b.targets == b.targets[0]):
        raise ZeroVariance("targets are constant; R² is undefined")
    ss_res = float(np.sum((b.predictions - b.targets) ** 2))
    return (ss_tot - ss_res) / ss_tot


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    rmse: float
    mae: float
    r2: float
    n: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_csv_row(self, header: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if header:
            writer.writerow(["mse", "rmse", "mae", "r2", "n"])
        writer.writerow([repr(self.mse), repr(self.rmse), repr(self.mae), repr(self.r2), self.n])
        return buf.getvalue()


def evaluate(predictions, targets) -> MetricsReport:
    """All four metrics for one batch.  R² is NaN when the targets are constant."""
    b = EvaluationBatch(predictions, targets)
    mse = compute_mse(b)
    try:
        r2 = compute_r2(b)
    except ZeroVariance:
        r2 = float("nan")
    return MetricsReport(mse=mse, rmse=math.sqrt(mse), mae=compute_mae(b), r2=r2, n=b.n)
