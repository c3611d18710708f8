"""Optimiser, learning-rate strategies, early stopping, the fit loop and lr search."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Protocol

import numpy as np

from . import numerics as nx
from .metrics import auroc
from .numerics import NumericalError

log = logging.getLogger(__name__)

LR_STRATEGIES = ("CYCLIC", "PLATEAU", "SEARCHED")

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class PlateauConfig:
    factor: float = 0.2
    patience: int = 15
    min_lr: float = 1e-5
    initial: float = 1e-3
    threshold: float = 1e-4

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError(f"plateau factor must be in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ValueError(f"plateau patience must be >= 1, got {self.patience}")
        if not 0 < self.min_lr <= self.initial:
            raise ValueError("plateau min_lr must be positive and <= initial")


@dataclass(frozen=True)
class TrainerConfig:
    max_epochs: int = 200
    batch_size: int = 64
    lr_strategy: str = "PLATEAU"
    base_lr: float = 1e-5
    max_lr: float = 1e-3
    gamma: float = 0.9999
    step_size: int | None = None  # iterations; None -> 4 x iterations per epoch
    lr: float = 1e-3  # constant rate for SEARCHED runs without a search result, and pretraining
    plateau: PlateauConfig = field(default_factory=PlateauConfig)
    early_stop_patience: int = 25
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.plateau, dict):
            object.__setattr__(self, "plateau", PlateauConfig(**self.plateau))
        if self.lr_strategy not in LR_STRATEGIES:
            raise ValueError(f"lr_strategy must be one of {LR_STRATEGIES}, got {self.lr_strategy!r}")
        if not 0 < self.base_lr <= self.max_lr:
            raise ValueError("need 0 < base_lr <= max_lr")
        if self.early_stop_patience < 1:
            raise ValueError(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if self.max_epochs < 0 or self.batch_size < 1:
            raise ValueError("max_epochs must be >= 0 and batch_size >= 1")
        if self.step_size is not None and self.step_size < 1:
            raise ValueError("step_size must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")


@dataclass(frozen=True)
class SearchSpec:
    n_trials: int = 20
    lr_range: tuple[float, float] = (1e-5, 1e-3)
    rungs: tuple[int, ...] = (5, 15, 45)
    eta: int = 3

    def __post_init__(self):
        lo, hi = self.lr_range
        if not 0 < lo <= hi:
            raise ValueError(f"lr_range must be positive and ordered, got {self.lr_range}")
        if self.n_trials < 1 or self.eta < 2:
            raise ValueError("n_trials must be >= 1 and eta >= 2")
        if not self.rungs or any(b <= a for a, b in zip(self.rungs, self.rungs[1:])) or self.rungs[0] < 1:
            raise ValueError(f"rungs must be increasing positive epochs, got {self.rungs}")


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads: dict, state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam update in place on ``params``; names absent from ``grads`` stay put."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    c1 = 1 - BETA1**state.step
    c2 = 1 - BETA2**state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------- schedules


def cyclic_lr(iteration: int, base_lr: float, max_lr: float, step_size: int, gamma: float = 1.0) -> float:
    """Triangular cycle whose amplitude decays as ``gamma**iteration`` (exp_range)."""
    if step_size < 1:
        raise ValueError(f"step_size must be >= 1, got {step_size}")
    cycle = math.floor(1 + iteration / (2 * step_size))
    x = abs(iteration / step_size - 2 * cycle + 1)
    return base_lr + (max_lr - base_lr) * max(0.0, 1 - x) * gamma**iteration


@dataclass
class PlateauState:
    lr: float
    best: float = math.inf
    bad_epochs: int = 0


def plateau_lr(state: PlateauState, val_loss: float, cfg: PlateauConfig = PlateauConfig()) -> float:
    """Minimise-mode plateau rule; mutates ``state`` and returns the new lr.

    After ``patience`` consecutive epochs without beating the best loss by
    more than ``threshold``, the rate is multiplied by ``factor`` (floored at
    ``min_lr``) and the counter restarts.
    """
    if val_loss < state.best - cfg.threshold:
        state.best = val_loss
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= cfg.patience:
            state.lr = max(state.lr * cfg.factor, cfg.min_lr)
            state.bad_epochs = 0
    return state.lr


def early_stop(val_aurocs, patience: int = 25) -> tuple[bool, int]:
    """Decide from a val-AUROC curve (epoch 1 first) whether to stop.

    Returns ``(stop, best_epoch)``; only a strict increase counts as
    improvement.
    """
    if len(val_aurocs) == 0:
        raise ValueError("early_stop needs at least one epoch")
    best_epoch, best = 1, val_aurocs[0]
    for epoch, v in enumerate(val_aurocs[1:], start=2):
        if v > best:
            best, best_epoch = v, epoch
    return len(val_aurocs) - best_epoch >= patience, best_epoch


# ---------------------------------------------------------------- fit loop


class Trainable(Protocol):
    def trainable_params(self): ...

    def loss(self, batch) -> tuple[nx.Tensor, np.ndarray]: ...

    def evaluate(self, batch) -> tuple[float, np.ndarray]: ...

    def state_arrays(self) -> dict: ...

    def load_state_arrays(self, arrays: dict) -> None: ...


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_auroc: float
    val_loss: float
    val_auroc: float
    lr: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auroc: float = float("nan")
    best_state: dict | None = None
    stopped_early: bool = False

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")

    def val_aurocs(self) -> list[float]:
        return [r.val_auroc for r in self.epochs]


def _safe_auroc(scores, labels) -> float:
    try:
        return auroc(scores, labels)
    except ValueError:
        return float("nan")


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield np.sort(order[start : start + batch_size])


class FitLoop:
    """Epoch-at-a-time training of a :class:`Trainable` on binary labels."""

    def __init__(self, model: Trainable, train_batch, val_batch, config: TrainerConfig, lr: float | None = None):
        self.model = model
        self.train_batch = train_batch
        self.val_batch = val_batch
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.adam = AdamState()
        self.iteration = 0
        self.iters_per_epoch = max(1, math.ceil(train_batch.n / config.batch_size))
        self.step_size = config.step_size or 4 * self.iters_per_epoch
        self.plateau = PlateauState(lr=config.plateau.initial)
        self.constant_lr = config.lr if lr is None else lr
        self.history = TrainHistory()

    def current_lr(self) -> float:
        strategy = self.config.lr_strategy
        if strategy == "CYCLIC":
            c = self.config
            return cyclic_lr(self.iteration, c.base_lr, c.max_lr, self.step_size, c.gamma)
        if strategy == "PLATEAU":
            return self.plateau.lr
        return self.constant_lr

    def step_epoch(self) -> EpochRecord:
        epoch = len(self.history.epochs) + 1
        params = self.model.trainable_params()
        losses, scores, labels = [], [], []
        for b, idx in enumerate(minibatches(self.train_batch.n, self.config.batch_size, self.rng)):
            batch = self.train_batch.subset(idx)
            params.zero_grad()
            loss, s = self.model.loss(batch)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, batch {b}")
            grads = nx.backward(loss, params)
            lr = self.current_lr()
            self.history.lr_trace.append(lr)
            adam_step(params, grads, self.adam, lr)
            self.iteration += 1
            losses.append(value * len(idx))
            scores.append(s)
            labels.append(batch.labels)
        train_loss = sum(losses) / self.train_batch.n
        val_loss, val_scores = self.model.evaluate(self.val_batch)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(
            epoch=epoch,
            train_loss=train_loss,
            train_auroc=_safe_auroc(np.concatenate(scores), np.concatenate(labels)),
            val_loss=val_loss,
            val_auroc=_safe_auroc(val_scores, self.val_batch.labels),
            lr=self.history.lr_trace[-1],
        )
        if self.config.lr_strategy == "PLATEAU":
            plateau_lr(self.plateau, val_loss, self.config.plateau)
        h = self.history
        h.epochs.append(rec)
        if h.best_state is None or rec.val_auroc > h.best_val_auroc:
            h.best_epoch, h.best_val_auroc = epoch, rec.val_auroc
            h.best_state = self.model.state_arrays()
        return rec

    def should_stop(self) -> bool:
        stop, _ = early_stop(self.history.val_aurocs(), self.config.early_stop_patience)
        return stop


def train(model: Trainable, train_batch, val_batch, config: TrainerConfig, lr: float | None = None) -> TrainHistory:
    """Minimise binary cross-entropy with the configured lr strategy.

    Stops after ``early_stop_patience`` epochs without a val-AUROC gain and
    restores the best-validation state into ``model`` before returning.
    """
    loop = FitLoop(model, train_batch, val_batch, config, lr)
    for _ in range(config.max_epochs):
        rec = loop.step_epoch()
        log.debug("epoch %d: %s", rec.epoch, rec)
        if loop.should_stop():
            loop.history.stopped_early = True
            break
    if loop.history.best_state is not None:
        model.load_state_arrays(loop.history.best_state)
    return loop.history


# --------------------------------------------------------------- lr search


@dataclass
class SearchResult:
    best_lr: float
    best_trial: int
    trials: list[dict]


def lr_search(
    objective: Callable[[float], Iterator[float]],
    spec: SearchSpec = SearchSpec(),
    seed: int = 0,
    log_path=None,
) -> SearchResult:
    """Log-uniform learning-rate search with successive-halving pruning.

    ``objective(lr)`` yields the validation loss reached at each rung of
    ``spec.rungs``.  After every rung but the last only the best
    ``max(1, n // eta)`` trials go on.  The lowest final loss wins.
    """
    rng = np.random.default_rng(seed)
    lo, hi = spec.lr_range
    lrs = np.exp(rng.uniform(math.log(lo), math.log(hi), size=spec.n_trials))
    lrs = np.clip(lrs, lo, hi)
    runs = [objective(float(lr)) for lr in lrs]
    last_loss = [math.inf] * spec.n_trials
    alive = list(range(spec.n_trials))
    records: list[dict] = []
    fh = open(log_path, "a", encoding="utf-8") if log_path is not None else None

    def emit(rec):
        records.append(rec)
        if fh is not None:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

    try:
        for r, epochs in enumerate(spec.rungs):
            for i in alive:
                loss = float(next(runs[i]))
                last_loss[i] = loss if math.isfinite(loss) else math.inf
                emit({"trial": i, "lr": float(lrs[i]), "rung": r, "epoch": epochs, "val_loss": loss})
            if r < len(spec.rungs) - 1:
                ranked = sorted(alive, key=lambda i: (last_loss[i], i))
                keep = max(1, len(alive) // spec.eta)
                for i in ranked[keep:]:
                    emit({"trial": i, "lr": float(lrs[i]), "rung": r, "state": "pruned"})
                alive = sorted(ranked[:keep])
        best = min(alive, key=lambda i: (last_loss[i], i))
        for i in alive:
            emit({"trial": i, "lr": float(lrs[i]), "state": "complete", "val_loss": last_loss[i]})
    finally:
        if fh is not None:
            fh.close()
        for run in runs:
            close = getattr(run, "close", None)
            if close is not None:
                close()
    return SearchResult(float(lrs[best]), best, records)
