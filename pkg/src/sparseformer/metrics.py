"""Depth-completion error metrics pooled over valid pixels."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

__all__ = ["MetricsReport", "compute_metrics", "DELTA_BASE"]

DELTA_BASE = 1.25


@dataclass(frozen=True)
class MetricsReport:
    rel: float
    rmse: float
    a1: float
    a2: float
    a3: float
    n_pixels: int

    def as_dict(self) -> dict:
        return asdict(self)


def compute_metrics(pred, gt, valid=None) -> MetricsReport:
    """REL, RMSE and threshold accuracies at 1.25, 1.25**2, 1.25**3.

    Raises ``ValueError`` if no pixel is valid or a valid depth is not positive.
    """
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    keep = np.ones(gt.shape, bool) if valid is None else np.asarray(valid, bool)
    p, g = pred[keep], gt[keep]
    if p.size == 0:
        raise ValueError("no valid pixels")
    if (g <= 0).any() or (p <= 0).any():
        raise ValueError("depths must be positive on valid pixels")
    err = g - p
    ratio = np.maximum(g / p, p / g)
    return MetricsReport(
        rel=float(np.mean(np.abs(err / g))),
        rmse=float(np.sqrt(np.mean(err * err))),
        a1=float(np.mean(ratio < DELTA_BASE)),
        a2=float(np.mean(ratio < DELTA_BASE ** 2)),
        a3=float(np.mean(ratio < DELTA_BASE ** 3)),
        n_pixels=int(p.size),
    )
