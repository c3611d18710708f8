"""Ranking and imputation-error metrics, accumulated in float64."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

UNDEFINED = float("nan")


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; each tied positive/negative pair counts 1/2."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise ValueError("labels must be 0/1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC is undefined when only one class is present")
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def imputation_metrics(imputed, ground_truth, eval_mask) -> dict:
    """MAE, RMSE and MRE over eval positions.  MRE is NaN when sum|x| is 0."""
    sel = np.asarray(eval_mask) > 0
    if not sel.any():
        raise ValueError("eval_mask selects no cell")
    est = np.asarray(imputed, dtype=np.float64)[sel]
    truth = np.asarray(ground_truth, dtype=np.float64)[sel]
    err = np.abs(est - truth)
    denom = np.abs(truth).sum()
    return {
        "mae": float(err.mean()),
        "rmse": float(math.sqrt((err**2).mean())),
        "mre": float(err.sum() / denom) if denom > 0 else UNDEFINED,
    }
