"""Downstream heads on top of a pretrained imputer, and static feature export.

Head widths: MLP2 is in->128->1, MLP5 tapers in->128->64->32->16->1, the
recurrent heads are one LSTM/GRU layer followed by the MLP2 head on the last
hidden state.  Recurrent heads read one row per hour: the (imputed or raw)
values plus an hour-index channel, and start from the imputer's last
forward hidden state.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import layers
from . import numerics as nx
from .imputer import Checkpoint, ImputerConfig, forward, infer
from .layers import Params
from .numerics import NumericalError, Tensor

HEAD_KINDS = ("MLP2", "MLP5", "LSTM1", "GRU1", "LINEAR")
POLICIES = ("FROZEN", "UNFROZEN")
INPUT_STRATEGIES = ("HIDDEN_STATES", "IMPUTED_WITH_HIDDEN_INIT", "RAW_WITH_HIDDEN_INIT")
HIDDEN_MERGES = ("concat", "mean")
RNN_KINDS = ("LSTM1", "GRU1")


@dataclass(frozen=True)
class HeadSpec:
    kind: str
    input_dim: int
    hidden_width: int = 128
    rnn_hidden: int = 108

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")
        if min(self.input_dim, self.hidden_width, self.rnn_hidden) < 1:
            raise ValueError("head dimensions must be positive")

    @property
    def widths(self) -> list[int]:
        w = self.hidden_width
        if self.kind == "MLP5":
            return [w, max(1, w // 2), max(1, w // 4), max(1, w // 8)]
        if self.kind == "LINEAR":
            return []
        return [w]


@dataclass(frozen=True)
class FinetunePlan:
    head: HeadSpec
    weight_policy: str = "FROZEN"
    input_strategy: str = "HIDDEN_STATES"
    hidden_merge: str = "concat"

    def __post_init__(self):
        if self.weight_policy not in POLICIES:
            raise ValueError(f"weight_policy must be one of {POLICIES}, got {self.weight_policy!r}")
        if self.input_strategy not in INPUT_STRATEGIES:
            raise ValueError(f"input_strategy must be one of {INPUT_STRATEGIES}, got {self.input_strategy!r}")
        if self.hidden_merge not in HIDDEN_MERGES:
            raise ValueError(f"hidden_merge must be one of {HIDDEN_MERGES}, got {self.hidden_merge!r}")
        recurrent = self.head.kind in RNN_KINDS
        if recurrent == (self.input_strategy == "HIDDEN_STATES"):
            raise ValueError(
                f"{self.head.kind} head cannot use input strategy {self.input_strategy}: "
                "MLP/LINEAR heads take HIDDEN_STATES, recurrent heads a hidden-init strategy"
            )

    @property
    def label(self) -> str:
        default = "HIDDEN_STATES" if self.head.kind not in RNN_KINDS else "IMPUTED_WITH_HIDDEN_INIT"
        return self.head.kind if self.input_strategy == default else f"{self.head.kind}/{self.input_strategy}"


def head_input_dim(kind: str, strategy: str, imputer: ImputerConfig, hidden_merge: str = "concat") -> int:
    if strategy == "HIDDEN_STATES":
        return imputer.hidden * (2 if hidden_merge == "concat" else 1)
    if strategy == "IMPUTED_WITH_HIDDEN_INIT":
        return imputer.d_features + 1
    return 2 * imputer.d_features + 1


def make_plan(
    kind: str,
    imputer: ImputerConfig,
    weight_policy: str = "FROZEN",
    input_strategy: str | None = None,
    hidden_merge: str = "concat",
    hidden_width: int = 128,
) -> FinetunePlan:
    """Plan with the head's input size derived from the imputer's dimensions."""
    if input_strategy is None:
        input_strategy = "IMPUTED_WITH_HIDDEN_INIT" if kind in RNN_KINDS else "HIDDEN_STATES"
    dim = head_input_dim(kind, input_strategy, imputer, hidden_merge)
    head = HeadSpec(kind, dim, hidden_width=hidden_width, rnn_hidden=imputer.hidden)
    return FinetunePlan(head, weight_policy, input_strategy, hidden_merge)


# ------------------------------------------------------------------ heads


def build_head(spec: HeadSpec, seed: int = 0, zero: bool = False) -> Params:
    rng = np.random.default_rng(seed)
    p = Params()
    n_in = spec.input_dim
    if spec.kind == "LSTM1":
        layers.lstm_params(p, "head.rnn", n_in, spec.rnn_hidden, rng)
        n_in = spec.rnn_hidden
    elif spec.kind == "GRU1":
        layers.gru_params(p, "head.rnn", n_in, spec.rnn_hidden, rng)
        n_in = spec.rnn_hidden
    for i, w in enumerate(spec.widths):
        layers.dense_params(p, f"head.l{i}", n_in, w, rng)
        n_in = w
    layers.dense_params(p, "head.out", n_in, 1, rng)
    if zero:
        for t in p.values():
            t.data[...] = 0
    return p


def _dense_count(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def param_count(spec: HeadSpec, policy: str = "FROZEN", imputer_params: int = 0) -> int:
    """Trainable parameters; UNFROZEN adds the imputer's ``imputer_params``."""
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}")
    total = 0
    n_in = spec.input_dim
    h = spec.rnn_hidden
    if spec.kind == "LSTM1":
        total += 4 * (n_in * h + h * h + h)
        n_in = h
    elif spec.kind == "GRU1":
        total += 3 * (n_in * h + h * h + h)
        n_in = h
    for w in spec.widths:
        total += _dense_count(n_in, w)
        n_in = w
    total += _dense_count(n_in, 1)
    return total + (imputer_params if policy == "UNFROZEN" else 0)


def _mlp(x, params: Params, spec: HeadSpec) -> Tensor:
    for i in range(len(spec.widths)):
        x = nx.relu(layers.dense(x, params, f"head.l{i}"))
    return layers.dense(x, params, "head.out")


# --------------------------------------------------------------- pipeline


@dataclass
class PipelineModel:
    """Pretrained imputer wired to a head according to a :class:`FinetunePlan`."""

    imputer_config: ImputerConfig
    imputer: Params
    head: Params
    plan: FinetunePlan
    origin: dict = field(default_factory=dict)  # pretraining metadata carried into exported checkpoints
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def frozen(self) -> bool:
        return self.plan.weight_policy == "FROZEN"

    def trainable_params(self) -> Params:
        p = Params.__new__(Params)
        items = dict(self.head._items)
        if not self.frozen:
            items.update(self.imputer._items)
        p._items = items
        return p

    # -- features

    def _frozen_features(self, batch):
        """Imputer outputs for a frozen model, memoised per record content."""
        keys = [batch.values[i].tobytes() + batch.mask[i].tobytes() for i in range(batch.n)]
        missing = [i for i, k in enumerate(keys) if k not in self._cache]
        if missing:
            out = infer(batch.subset(np.array(missing)), self.imputer, self.imputer_config)
            for j, i in enumerate(missing):
                self._cache[keys[i]] = (
                    out.hidden_last["fwd"].data[j], out.hidden_last["bwd"].data[j], out.imputed[j],
                )
        rows = [self._cache[k] for k in keys]
        return tuple(np.stack(col) for col in zip(*rows))

    def _imputer_outputs(self, batch):
        if self.frozen:
            h_f, h_b, imputed = self._frozen_features(batch)
            steps = [imputed[:, t] for t in range(imputed.shape[1])]
            return Tensor(h_f), Tensor(h_b), steps
        out = forward(batch, self.imputer, self.imputer_config)
        return out.hidden_last["fwd"], out.hidden_last["bwd"], out.imputed_steps

    def logits(self, batch) -> Tensor:
        spec = self.plan.head
        h_f, h_b, steps = self._imputer_outputs(batch)
        if self.plan.input_strategy == "HIDDEN_STATES":
            if self.plan.hidden_merge == "concat":
                x = nx.concat([h_f, h_b], axis=1)
            else:
                x = nx.scale(h_f + h_b, 0.5)
            return _mlp(x, self.head, spec)
        t_len = batch.n_steps
        hour = np.ones((batch.n, 1), dtype=np.float32)
        h = h_f
        c = Tensor(np.zeros_like(h_f.data))
        for t in range(t_len):
            clock = hour * (t / max(1, t_len - 1))
            if self.plan.input_strategy == "IMPUTED_WITH_HIDDEN_INIT":
                x_t = nx.concat([steps[t], clock], axis=1)
            else:
                x_t = nx.concat([batch.values[:, t], batch.mask[:, t], clock], axis=1)
            if spec.kind == "LSTM1":
                h, c = layers.lstm_cell(x_t, h, c, self.head, "head.rnn")
            else:
                h = layers.gru_cell(x_t, h, self.head, "head.rnn")
        return _mlp(h, self.head, spec)

    # -- Trainable protocol

    def loss(self, batch):
        z = self.logits(batch)
        if not np.all(np.isfinite(z.data)):
            raise NumericalError("non-finite classifier logits")
        return nx.bce_with_logits(z, batch.labels), _probabilities(z.data)

    def evaluate(self, batch, chunk: int = 256):
        losses, scores = [], []
        with nx.no_grad():
            for start in range(0, batch.n, chunk):
                sub = batch.subset(np.arange(start, min(batch.n, start + chunk)))
                loss, s = self.loss(sub)
                losses.append(float(loss.data) * sub.n)
                scores.append(s)
        return sum(losses) / batch.n, np.concatenate(scores)

    def state_arrays(self) -> dict:
        out = {f"imputer/{k}": v for k, v in self.imputer.arrays().items()}
        out.update(self.head.arrays())
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        self.head.load_arrays({k: v for k, v in arrays.items() if k.startswith("head.")})
        self.imputer.load_arrays({k[len("imputer/"):]: v for k, v in arrays.items() if k.startswith("imputer/")})
        self._cache.clear()

    def imputer_checkpoint(self, **extra) -> Checkpoint:
        meta = dict(self.origin)
        meta["extra"] = {**meta.get("extra", {}), **extra}
        return Checkpoint(self.imputer_config, self.imputer.arrays(), **meta)


def _probabilities(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64).ravel()
    p = 1.0 / (1.0 + np.exp(-z))
    return np.clip(p, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def assemble(checkpoint: Checkpoint, plan: FinetunePlan, seed: int = 0, d_features: int | None = None,
             zero_head: bool = False) -> PipelineModel:
    """Wire a head to a copy of the checkpoint's imputer according to ``plan``."""
    cfg = checkpoint.config
    if d_features is not None and d_features != cfg.d_features:
        raise ValueError(f"data has {d_features} features but the checkpoint expects {cfg.d_features}")
    expected = head_input_dim(plan.head.kind, plan.input_strategy, cfg, plan.hidden_merge)
    if plan.head.input_dim != expected:
        raise ValueError(
            f"{plan.input_strategy} feeds {expected} inputs but the {plan.head.kind} head expects {plan.head.input_dim}"
        )
    if plan.head.kind in RNN_KINDS and plan.head.rnn_hidden != cfg.hidden:
        raise ValueError(
            f"recurrent head width {plan.head.rnn_hidden} cannot start from imputer hidden size {cfg.hidden}"
        )
    imputer = checkpoint.params()
    imputer.set_trainable(plan.weight_policy == "UNFROZEN")
    origin = {"epoch": checkpoint.epoch, "val_metric": checkpoint.val_metric, "extra": dict(checkpoint.extra)}
    return PipelineModel(cfg, imputer, build_head(plan.head, seed, zero=zero_head), plan, origin)


def forward_classify(model: PipelineModel, batch) -> np.ndarray:
    """Sigmoid probabilities in (0, 1), one per record."""
    with nx.no_grad():
        z = model.logits(batch)
    if not np.all(np.isfinite(z.data)):
        raise NumericalError(f"non-finite logits for records {[batch.ids[i] for i in np.flatnonzero(~np.isfinite(z.data.ravel()))][:5]}")
    return _probabilities(z.data)


# ----------------------------------------------------------- static export


class ExportError(OSError):
    """Feature table could not be written."""


@dataclass(frozen=True)
class FeatureTable:
    ids: tuple
    features: np.ndarray  # [N, K]
    labels: np.ndarray

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def subset(self, idx) -> "FeatureTable":
        idx = np.asarray(idx)
        return FeatureTable(tuple(self.ids[i] for i in idx), self.features[idx], self.labels[idx])


def feature_table(checkpoint: Checkpoint, batch, kind: str) -> FeatureTable:
    """Imputed series flattened to [N, T*D], or final hidden states [N, 2H]."""
    if kind not in ("IMPUTED", "HIDDEN"):
        raise ValueError(f"feature kind must be IMPUTED or HIDDEN, got {kind!r}")
    out = infer(batch, checkpoint.params(), checkpoint.config)
    if kind == "IMPUTED":
        x = out.imputed.reshape(batch.n, -1)
    else:
        x = np.concatenate([out.hidden_last["fwd"].data, out.hidden_last["bwd"].data], axis=1)
    return FeatureTable(tuple(batch.ids), x.astype(np.float32), np.asarray(batch.labels))


def export_features(checkpoint: Checkpoint, batch, kind: str, path) -> Path:
    """Write ``record_id,f0..fK,label`` rows for ``batch``."""
    table = feature_table(checkpoint, batch, kind)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["record_id", *(f"f{j}" for j in range(table.features.shape[1])), "label"])
            for rid, row, y in zip(table.ids, table.features, table.labels):
                w.writerow([rid, *(repr(float(v)) for v in row), int(y)])
    except OSError as exc:
        raise ExportError(f"cannot write feature table to {path}: {exc}") from exc
    return path


def read_feature_table(path) -> FeatureTable:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    ids = tuple(r[0] for r in body)
    x = np.array([[float(v) for v in r[1:-1]] for r in body], dtype=np.float32)
    y = np.array([float(r[-1]) for r in body], dtype=np.float32)
    return FeatureTable(ids, x, y)


@dataclass
class StaticModel:
    """A head trained directly on an exported feature table."""

    head: Params
    spec: HeadSpec

    @classmethod
    def linear(cls, input_dim: int, seed: int = 0, kind: str = "LINEAR") -> "StaticModel":
        spec = HeadSpec(kind, input_dim)
        return cls(build_head(spec, seed), spec)

    def trainable_params(self) -> Params:
        return self.head

    def loss(self, table: FeatureTable):
        z = _mlp(Tensor(table.features), self.head, self.spec)
        return nx.bce_with_logits(z, table.labels), _probabilities(z.data)

    def evaluate(self, table: FeatureTable):
        with nx.no_grad():
            loss, s = self.loss(table)
        return float(loss.data), s

    def state_arrays(self) -> dict:
        return self.head.arrays()

    def load_state_arrays(self, arrays: dict) -> None:
        self.head.load_arrays(arrays)
