"""Hourly binning, normalisation, time gaps, fold splits and synthetic data."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

N_STEPS = 48


class DataFormatError(ValueError):
    """A malformed row in an input CSV file."""


@dataclass(frozen=True)
class EventRecord:
    record_id: str
    t: float
    feature: str
    value: float

    def __post_init__(self):
        if not math.isfinite(self.t) or self.t < 0:
            raise ValueError(f"event time must be finite and non-negative, got {self.t}")
        if not self.feature:
            raise ValueError("event feature must be non-empty")


@dataclass(frozen=True)
class HourlyGrid:
    """Raw (unnormalised) hourly grid; ``values`` is 0 wherever ``mask`` is 0."""

    ids: tuple[str, ...]
    features: tuple[str, ...]
    values: np.ndarray
    mask: np.ndarray

    def take(self, ids: Sequence[str]) -> "HourlyGrid":
        pos = {r: i for i, r in enumerate(self.ids)}
        idx = np.array([pos[r] for r in ids], dtype=np.int64)
        return HourlyGrid(tuple(ids), self.features, self.values[idx], self.mask[idx])


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeSeriesBatch:
    """Normalised series with training-view mask, time gaps and eval mask.

    ``mask`` marks cells visible to the model, ``eval_mask`` marks observed
    cells hidden artificially (their original values live in
    ``ground_truth``).  The two masks never overlap.
    """

    values: np.ndarray
    mask: np.ndarray
    delta: np.ndarray
    eval_mask: np.ndarray
    ground_truth: np.ndarray
    labels: np.ndarray
    ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        n, t, d = self.values.shape
        for name in ("mask", "delta", "eval_mask", "ground_truth"):
            if getattr(self, name).shape != (n, t, d):
                raise ValueError(f"{name} shape {getattr(self, name).shape} != values shape {(n, t, d)}")
        if self.labels.shape != (n,):
            raise ValueError(f"labels shape {self.labels.shape} != ({n},)")
        if np.any((self.mask > 0) & (self.eval_mask > 0)):
            raise ValueError("eval_mask overlaps the observed mask")
        for name in ("values", "mask", "delta", "eval_mask", "ground_truth", "labels"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        if not self.ids:
            object.__setattr__(self, "ids", tuple(str(i) for i in range(n)))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def n_features(self) -> int:
        return self.values.shape[2]

    def subset(self, idx) -> "TimeSeriesBatch":
        idx = np.asarray(idx)
        return TimeSeriesBatch(
            self.values[idx], self.mask[idx], self.delta[idx], self.eval_mask[idx],
            self.ground_truth[idx], self.labels[idx], tuple(self.ids[i] for i in idx),
        )

    def reversed(self) -> "TimeSeriesBatch":
        """Time-reversed view; delta is recomputed on the reversed mask."""
        mask = self.mask[:, ::-1]
        return TimeSeriesBatch(
            self.values[:, ::-1], mask, compute_delta(mask), self.eval_mask[:, ::-1],
            self.ground_truth[:, ::-1], self.labels, self.ids,
        )

    def natural(self) -> "TimeSeriesBatch":
        """Undo artificial masking: eval cells become observed again."""
        ev = self.eval_mask > 0
        mask = np.where(ev, 1, self.mask).astype(np.float32)
        values = np.where(ev, self.ground_truth, self.values).astype(np.float32)
        zero = np.zeros_like(values)
        return TimeSeriesBatch(values, mask, compute_delta(mask), zero, zero, self.labels, self.ids)

    def with_labels(self, labels) -> "TimeSeriesBatch":
        return replace(self, labels=np.asarray(labels, dtype=np.float32))


def make_batch(values, mask, labels, ids: Sequence[str] = ()) -> TimeSeriesBatch:
    """Batch with no artificial masking; missing cells carry the 0 sentinel."""
    mask = np.asarray(mask, dtype=np.float32)
    values = np.where(mask > 0, values, 0).astype(np.float32)
    zero = np.zeros_like(values)
    return TimeSeriesBatch(
        values, mask, compute_delta(mask), zero, zero.copy(),
        np.asarray(labels, dtype=np.float32), tuple(ids),
    )


# ------------------------------------------------------------------ binning


def bin_hourly(
    events: Iterable[EventRecord],
    features: Sequence[str] | None = None,
    record_ids: Sequence[str] | None = None,
    n_steps: int = N_STEPS,
) -> HourlyGrid:
    """Average each record's readings per feature within each hour ``[h, h+1)``.

    Readings at or after ``n_steps`` hours are dropped.  Records listed in
    ``record_ids`` without any retained reading stay as all-missing rows.
    """
    events = list(events)
    if features is None:
        features = sorted({e.feature for e in events})
    if record_ids is None:
        record_ids = sorted({e.record_id for e in events})
    rpos = {r: i for i, r in enumerate(record_ids)}
    fpos = {f: j for j, f in enumerate(features)}
    n, d = len(record_ids), len(features)
    sums = np.zeros((n, n_steps, d), dtype=np.float64)
    counts = np.zeros((n, n_steps, d), dtype=np.int64)
    for e in events:
        hour = int(math.floor(e.t))
        if hour >= n_steps or e.feature not in fpos or e.record_id not in rpos:
            continue
        i, j = rpos[e.record_id], fpos[e.feature]
        sums[i, hour, j] += e.value
        counts[i, hour, j] += 1
    observed = counts > 0
    values = np.where(observed, sums / np.maximum(counts, 1), 0.0).astype(np.float32)
    for i in np.flatnonzero(~observed.any(axis=(1, 2))):
        log.warning("record %s has no events in the first %d hours; kept as all-missing", record_ids[i], n_steps)
    return HourlyGrid(tuple(record_ids), tuple(features), values, observed.astype(np.float32))


# ------------------------------------------------------------ normalisation


def normalize_fit(grid: np.ndarray, mask: np.ndarray) -> NormStats:
    """Per-feature mean and population std over observed cells only."""
    obs = np.asarray(mask) > 0
    x = np.asarray(grid, dtype=np.float64)
    d = x.shape[-1]
    x2 = x.reshape(-1, d)
    o2 = obs.reshape(-1, d)
    count = o2.sum(axis=0)
    mean = np.where(count > 0, (x2 * o2).sum(axis=0) / np.maximum(count, 1), 0.0)
    var = np.where(count > 0, (((x2 - mean) * o2) ** 2).sum(axis=0) / np.maximum(count, 1), 0.0)
    return NormStats(mean=mean, std=np.sqrt(var))


def normalize_apply(grid: np.ndarray, mask: np.ndarray, stats: NormStats) -> np.ndarray:
    """z-score observed cells; zero-std features are only mean-centred."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape[-1] != stats.mean.shape[0] or stats.std.shape != stats.mean.shape:
        raise ValueError(
            f"grid feature dim {grid.shape[-1]} does not match stats of size {stats.mean.shape}"
        )
    safe = np.where(stats.std > 0, stats.std, 1.0)
    z = (grid - stats.mean) / safe
    return np.where(np.asarray(mask) > 0, z, 0.0).astype(np.float32)


def compute_delta(mask: np.ndarray) -> np.ndarray:
    """Hours since the previous observation, per feature, on a unit-step grid.

    ``delta[:, 0] = 0``; afterwards the gap resets to 1 after an observed
    step and grows by one after a missing one.
    """
    mask = np.asarray(mask)
    delta = np.zeros(mask.shape, dtype=np.float32)
    for t in range(1, mask.shape[1]):
        delta[:, t] = np.where(mask[:, t - 1] > 0, 1.0, 1.0 + delta[:, t - 1])
    return delta


# ------------------------------------------------------------------- folds


def kfold_split(ids: Sequence[str], k: int = 5, seed: int = 0) -> list[FoldSplit]:
    """Shuffled k-way partition; fold i tests on block i, validates on block i+1."""
    ids = list(ids)
    if k < 3:
        raise ValueError(f"k must be >= 3 so train, val and test blocks are distinct, got {k}")
    if len(ids) < k:
        raise ValueError(f"need at least k={k} ids, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    blocks = [tuple(ids[j] for j in b) for b in np.array_split(order, k)]
    folds = []
    for i in range(k):
        v = (i + 1) % k
        train = tuple(r for j, b in enumerate(blocks) if j not in (i, v) for r in b)
        folds.append(FoldSplit(i, train, blocks[v], blocks[i]))
    return folds


# ---------------------------------------------------------------- CSV i/o

EVENTS_HEADER = ["record_id", "t_hours", "feature", "value"]
LABELS_HEADER = ["record_id", "label"]


def _read_rows(path: Path, header: list[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [c.strip() for c in first] != header:
            raise DataFormatError(f"{path}:1: expected header {','.join(header)}, got {first}")
        for row in reader:
            yield reader.line_num, row


def read_events_csv(path) -> list[EventRecord]:
    path = Path(path)
    events, errors = [], []
    for line, row in _read_rows(path, EVENTS_HEADER):
        if not row:
            continue
        try:
            rid, t, feat, val = row
            events.append(EventRecord(rid, float(t), feat, float(val)))
            if not math.isfinite(events[-1].value):
                raise ValueError(f"non-finite value {val!r}")
        except ValueError as exc:
            errors.append(f"{path}:{line}: {exc}")
    if errors:
        raise DataFormatError("malformed event rows:\n" + "\n".join(errors))
    return events


def read_labels_csv(path) -> dict[str, int]:
    path = Path(path)
    labels, errors = {}, []
    for line, row in _read_rows(path, LABELS_HEADER):
        if not row:
            continue
        if len(row) != 2 or row[1].strip() not in ("0", "1"):
            errors.append(f"{path}:{line}: expected record_id,label with label in {{0,1}}, got {row}")
            continue
        labels[row[0]] = int(row[1])
    if errors:
        raise DataFormatError("malformed label rows:\n" + "\n".join(errors))
    return labels


def write_events_csv(path, events: Iterable[EventRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENTS_HEADER)
        for e in events:
            w.writerow([e.record_id, repr(e.t), e.feature, repr(e.value)])


def write_labels_csv(path, labels: dict[str, int]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABELS_HEADER)
        for rid, y in labels.items():
            w.writerow([rid, int(y)])


# --------------------------------------------------------------- synthetic


@dataclass
class SynthData:
    events: list[EventRecord]
    labels: dict[str, int]
    clean: np.ndarray  # [n, t, d] noiseless-observation grid on the raw scale
    mask: np.ndarray
    params: dict


def synth_generate(
    n: int,
    t: int = N_STEPS,
    d: int = 8,
    missing_rate: float = 0.4,
    seed: int = 0,
    sharpness: float = 8.0,
) -> SynthData:
    """Desk-scale stand-in for ICU extracts.

    Each record has a static latent level plus an AR(1) excursion mixed into
    ``d`` correlated features.  The label is a steep logistic of a fixed
    linear functional (time-averaged weighted features) of the clean series,
    and cells go missing per feature at heterogeneous rates averaging
    ``missing_rate``.
    """
    if d < 2:
        raise ValueError(f"d must be >= 2, got {d}")
    if not 0 <= missing_rate < 1:
        raise ValueError(f"missing_rate must be in [0, 1), got {missing_rate}")
    if n < 1 or t < 1:
        raise ValueError("n and t must be positive")
    rng = np.random.default_rng(seed)
    k = max(2, d // 2)
    mixing = rng.normal(0, 1 / math.sqrt(k), size=(k, d))
    loc = rng.uniform(-5, 50, size=d)
    spread = rng.uniform(0.5, 10, size=d)
    phi = 0.9
    level = rng.normal(size=(n, 1, k))
    z = np.zeros((n, t, k))
    z[:, 0] = rng.normal(size=(n, k))
    for s in range(1, t):
        z[:, s] = phi * z[:, s - 1] + math.sqrt(1 - phi**2) * rng.normal(size=(n, k))
    latent = level + 0.5 * z
    std_clean = latent @ mixing
    clean = loc + spread * std_clean
    noisy = clean + spread * 0.1 * rng.normal(size=clean.shape)

    weights = rng.normal(size=d)
    score = std_clean.mean(axis=1) @ weights
    centre, scale_ = float(np.median(score)), float(score.std()) or 1.0
    logits = sharpness * (score - centre) / scale_
    labels_arr = (rng.uniform(size=n) < 1 / (1 + np.exp(-logits))).astype(int)

    base = rng.uniform(0.5, 1.5, size=d)
    rates = np.clip(missing_rate * base / base.mean(), 0.0, 0.95)
    mask = rng.uniform(size=(n, t, d)) >= rates
    offsets = rng.uniform(0, 1, size=(n, t, d))

    ids = [f"r{i:05d}" for i in range(n)]
    feats = [f"f{j:02d}" for j in range(d)]
    events = [
        EventRecord(ids[i], float(s + offsets[i, s, j]), feats[j], float(np.float32(noisy[i, s, j])))
        for i, s, j in zip(*np.nonzero(mask))
    ]
    params = {
        "n": n, "t": t, "d": d, "missing_rate": missing_rate, "seed": seed,
        "sharpness": sharpness, "phi": phi,
        "feature_missing_rates": rates.tolist(), "label_weights": weights.tolist(),
        "score_centre": centre, "score_scale": scale_,
        "loc": loc.tolist(), "spread": spread.tolist(),
    }
    log.info("synthetic data generated: %s", params)
    return SynthData(events, dict(zip(ids, labels_arr.tolist())), clean.astype(np.float32),
                     mask.astype(np.float32), params)
