"""Ranking and localization metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, DimensionError, UndefinedMetricError


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: (#concordant pairs + 0.5 * #ties) / (#pos * #neg)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise DimensionError(f"roc_auc: {s.shape[0]} scores vs {y.shape[0]} labels")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise ContractError("roc_auc: labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs at least one positive and one negative label")
    ranks = rankdata(s)  # average ranks handle ties as half-concordant
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def per_class_auc(scores: np.ndarray, labels: np.ndarray) -> list[float | None]:
    """AUC per column; None where the column has a single label value."""
    out: list[float | None] = []
    for c in range(labels.shape[1]):
        try:
            out.append(roc_auc(scores[:, c], labels[:, c]))
        except UndefinedMetricError:
            out.append(None)
    return out


def mean_auc(per_class: Sequence[float | None]) -> float:
    vals = [v for v in per_class if v is not None]
    if not vals:
        raise UndefinedMetricError("mean_auc needs at least one defined class AUC")
    return float(np.mean(vals))


def localization_score(heatmap, gt_region) -> tuple[float, bool]:
    """IoU of ``heatmap >= 0.5 * max`` against the region, and the pointing-game hit."""
    hm = np.asarray(heatmap, dtype=np.float64)
    gt = np.asarray(gt_region).astype(bool)
    if hm.shape != gt.shape:
        raise DimensionError(f"localization_score: heatmap {hm.shape} vs region {gt.shape}")
    if not gt.any():
        raise ContractError("localization_score: ground-truth region is empty")
    pred = hm >= 0.5 * hm.max()
    union = np.logical_or(pred, gt).sum()
    iou = float(np.logical_and(pred, gt).sum() / union)
    hit = bool(gt.flat[int(np.argmax(hm))])
    return iou, hit


@dataclass
class MetricsReport:
    class_names: list[str]
    per_class: list[float | None]
    mean_auc: float
    iou_rate: float | None = None
    pointing_rate: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out: dict = {name: auc for name, auc in zip(self.class_names, self.per_class)}
        out["mean_auc"] = self.mean_auc
        out["iou_rate"] = self.iou_rate
        out["pointing_rate"] = self.pointing_rate
        out.update(self.extra)
        return out
