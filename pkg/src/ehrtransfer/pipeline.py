"""Per-fold data preparation: normalise with training statistics, then hold out cells."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import FoldSplit, HourlyGrid, NormStats, TimeSeriesBatch, make_batch, normalize_apply, normalize_fit
from .masking import MaskPlan, apply_nonuniform_mask
from .seeding import derive_seed

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class FoldData:
    split: FoldSplit
    stats: NormStats
    train: TimeSeriesBatch
    val: TimeSeriesBatch
    test: TimeSeriesBatch

    def batch(self, name: str) -> TimeSeriesBatch:
        return getattr(self, name)


def prepare_fold(grid: HourlyGrid, labels: dict, split: FoldSplit, plan: MaskPlan) -> FoldData:
    """Build masked train/val/test batches for one fold.

    Normalisation statistics come from the training records only; each split
    is masked with its own seed derived from ``plan.seed``.
    """
    train = grid.take(split.train_ids)
    stats = normalize_fit(train.values, train.mask)
    batches = {}
    for name, ids in zip(SPLITS, (split.train_ids, split.val_ids, split.test_ids)):
        g = grid.take(ids)
        y = np.array([labels[r] for r in ids], dtype=np.float32)
        batch = make_batch(normalize_apply(g.values, g.mask, stats), g.mask, y, ids)
        batches[name] = apply_nonuniform_mask(batch, plan.with_seed(derive_seed(plan.seed, split.fold_index, name)))
    return FoldData(split, stats, **batches)
