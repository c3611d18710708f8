"""Artificial hold-out masking of observed cells for imputer training and scoring.

The default per-feature weight is the feature's observed fraction
``1 - r_d``, so densely recorded features lose more cells.  This is a
stand-in for the CSAI weighting rule, which is not published in closed form;
pass ``mode="explicit"`` with a weight vector to substitute another rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dataset import TimeSeriesBatch, compute_delta

WEIGHT_MODES = ("uniform", "inverse-missing-rate", "explicit")


@dataclass(frozen=True)
class MaskPlan:
    rate: float = 0.10
    mode: str = "inverse-missing-rate"
    per_feature_weights: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.rate < 1:
            raise ValueError(f"mask rate must be in (0, 1), got {self.rate}")
        if self.mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weight mode {self.mode!r}; expected one of {WEIGHT_MODES}")
        if self.mode == "explicit":
            w = self.per_feature_weights
            if w is None or any(x < 0 for x in w) or not any(x > 0 for x in w):
                raise ValueError("explicit weights must be non-negative and not all zero")

    def with_seed(self, seed: int) -> "MaskPlan":
        return replace(self, seed=int(seed))


def feature_weights(plan: MaskPlan, mask: np.ndarray) -> np.ndarray:
    d = mask.shape[-1]
    if plan.mode == "uniform":
        return np.ones(d)
    if plan.mode == "explicit":
        w = np.asarray(plan.per_feature_weights, dtype=np.float64)
        if w.shape != (d,):
            raise ValueError(f"explicit weights have {w.shape[0]} entries for {d} features")
        return w
    observed_fraction = (np.asarray(mask) > 0).reshape(-1, d).mean(axis=0)
    return observed_fraction


def apply_nonuniform_mask(batch: TimeSeriesBatch, plan: MaskPlan) -> TimeSeriesBatch:
    """Hide exactly ``floor(rate * #observed)`` observed cells.

    Cells are drawn without replacement with probability proportional to
    their feature's weight (Efraimidis-Spirakis keys ``log(u) / w``), using a
    PCG64 generator seeded from ``plan.seed``.
    """
    if np.any(batch.eval_mask > 0):
        raise ValueError("batch already carries an eval mask")
    observed = np.flatnonzero(batch.mask.ravel() > 0)
    if observed.size == 0:
        raise ValueError("cannot mask a batch with no observed cells")
    k = math.floor(plan.rate * observed.size)
    if k < 1:
        raise ValueError(f"rate {plan.rate} x {observed.size} observed cells selects no cell")
    w = feature_weights(plan, batch.mask)
    cell_w = w[observed % batch.n_features]
    eligible = cell_w > 0
    if eligible.sum() < k:
        raise ValueError(f"only {eligible.sum()} observed cells have positive weight, need {k}")
    rng = np.random.default_rng(plan.seed)
    u = rng.random(observed.size)
    keys = np.full(observed.size, -np.inf)
    keys[eligible] = np.log(u[eligible]) / cell_w[eligible]
    # stable order so ties (impossible in practice) still resolve deterministically
    chosen = observed[np.argsort(-keys, kind="stable")[:k]]

    hide = np.zeros(batch.values.size, dtype=bool)
    hide[chosen] = True
    hide = hide.reshape(batch.values.shape)
    mask = np.where(hide, 0, batch.mask).astype(np.float32)
    values = np.where(hide, 0, batch.values).astype(np.float32)
    ground_truth = np.where(hide, batch.values, 0).astype(np.float32)
    return TimeSeriesBatch(
        values, mask, compute_delta(mask), hide.astype(np.float32), ground_truth,
        batch.labels, batch.ids,
    )
