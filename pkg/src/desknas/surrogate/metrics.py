"""Rank-correlation metrics for predictor quality."""

from __future__ import annotations

import numpy as np
from scipy.stats import kendalltau, rankdata


def spearman(a, b) -> float:
    """Pearson correlation of average ranks; 0.0 when either side is constant."""
    ra = rankdata(a, method="average")
    rb = rankdata(b, method="average")
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0:
        return 0.0
    return float(np.clip((ra * rb).sum() / denom, -1.0, 1.0))


def kendall(a, b) -> float:
    """Tie-corrected Kendall tau-b; 0.0 when either side is constant."""
    tau = kendalltau(a, b, variant="b").statistic
    return 0.0 if np.isnan(tau) else float(tau)


def rank_metrics(y_pred, y_true) -> tuple[float, float, float]:
    """(spearman rho, kendall tau-b, rmse)."""
    y_pred = np.asarray(y_pred, dtype=float)
    y_true = np.asarray(y_true, dtype=float)
    if y_pred.shape != y_true.shape or y_pred.ndim != 1:
        raise ValueError("predictions and targets must be 1-D arrays of equal length")
    if len(y_true) < 2:
        raise ValueError("rank metrics need at least two points")
    rmse = float(np.sqrt(np.mean((y_pred - y_true) ** 2)))
    return spearman(y_pred, y_true), kendall(y_pred, y_true), rmse
