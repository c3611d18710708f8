"""Bidirectional decay-gated recurrent imputer with attention-conditioned start state.

Each direction runs a BRITS-style recurrence: the previous hidden state is
decayed by the time gap, regressed to a history estimate, complemented with
the observations, regressed across features, and fused with the history
estimate through a gate driven by the input decay and the mask.  The
recurrent cell then consumes the embedded complement (plus a sinusoidal
position code) concatenated with the mask.

The backward direction starts from an attention pooling of the forward
direction's hidden sequence (``condition_initial_state``), which is how the
conditional knowledge embedding is realised here.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layers
from . import numerics as nx
from .dataset import TimeSeriesBatch
from .layers import Params
from .metrics import imputation_metrics
from .numerics import NumericalError, Tensor
from .training import AdamState, TrainerConfig, TrainingError, adam_step, minibatches

log = logging.getLogger(__name__)

DIRECTIONS = ("fwd", "bwd")


@dataclass(frozen=True)
class ImputerConfig:
    d_features: int
    hidden: int = 108
    embed_dim: int = 64
    attention_heads: int = 1
    seed: int = 0
    n_steps: int = 48
    consistency_weight: float = 0.1
    eval_loss_weight: float = 1.0
    condition_initial_state: bool = True

    def __post_init__(self):
        if self.d_features < 1 or self.hidden < 1 or self.n_steps < 1:
            raise ValueError("d_features, hidden and n_steps must be positive")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ValueError(f"embed_dim must be even and positive, got {self.embed_dim}")
        if self.attention_heads != 1:
            raise ValueError("only single-head attention is supported")


# ---------------------------------------------------------------- pieces


# exp(-80) is still a normal float32, so gamma never underflows to 0
DECAY_CAP = 80.0


def decay(delta, w, b) -> Tensor:
    """``exp(-max(0, delta @ W + b))`` for a matrix ``W`` or elementwise for a vector ``w``.

    The exponent is capped at ``DECAY_CAP`` to keep gamma strictly positive in float32.
    """
    w = nx.as_tensor(w)
    if w.data.ndim == 2:
        z = nx.linear(delta, w, b)
    else:
        z = nx.add(nx.mul(delta, w), b)
    return nx.exp(-nx.clamp_max(nx.relu(z), DECAY_CAP))


def positional_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal code: ``pe[2i] = sin(t / 10000**(2i/dim))``, ``pe[2i+1]`` the cosine."""
    if dim % 2:
        raise ValueError(f"positional embedding dim must be even, got {dim}")
    i = np.arange(dim // 2, dtype=np.float64)
    angle = t / np.power(10000.0, 2 * i / dim)
    pe = np.empty(dim, dtype=np.float64)
    pe[0::2] = np.sin(angle)
    pe[1::2] = np.cos(angle)
    return pe.astype(np.float32)


def positional_table(n_steps: int, dim: int) -> np.ndarray:
    return np.stack([positional_embedding(t, dim) for t in range(n_steps)])


def attention_condition(seq: list, w_k, query) -> tuple[Tensor, Tensor]:
    """Pool a hidden sequence with a learned query.

    ``seq`` is a list of [N, H] tensors (one per step).  Scores are
    ``(h_t @ W_k) @ q / sqrt(H)``, softmax-normalised over steps; the output
    is the weighted sum of the unprojected hidden vectors.  Returns the
    pooled [N, H] tensor and the [N, n] weights.
    """
    if len(seq) == 0:
        raise ValueError("attention over an empty sequence")
    hid = seq[0].shape[1]
    inv = 1.0 / math.sqrt(hid)
    scores = nx.concat([nx.scale(nx.matmul(nx.matmul(h, w_k), query), inv) for h in seq], axis=1)
    weights = nx.softmax_rows(scores)
    out = None
    for t, h in enumerate(seq):
        term = nx.repeat_cols(nx.slice_cols(weights, t, t + 1), hid) * h
        out = term if out is None else out + term
    return out, weights


def init_params(config: ImputerConfig) -> Params:
    """Uniform +-1/sqrt(fan_in) initialisation; feature-regression diagonals are zero."""
    rng = np.random.default_rng(config.seed)
    d, h, e = config.d_features, config.hidden, config.embed_dim
    p = Params()
    layers.dense_params(p, "embed", d, e, rng)
    p["attn.W_k"] = layers.uniform(rng, (h, h), h)
    p["attn.q"] = layers.uniform(rng, (h, 1), h)
    for dr in DIRECTIONS:
        layers.dense_params(p, f"{dr}.decay_h", d, h, rng)
        p[f"{dr}.decay_x.w"] = layers.uniform(rng, (d,), 1)
        p[f"{dr}.decay_x.b"] = layers.uniform(rng, (d,), 1)
        layers.dense_params(p, f"{dr}.hist", h, d, rng)
        w = layers.uniform(rng, (d, d), d)
        np.fill_diagonal(w, 0.0)
        p[f"{dr}.feat.W"] = w
        p[f"{dr}.feat.b"] = layers.uniform(rng, (d,), d)
        layers.dense_params(p, f"{dr}.beta", 2 * d, d, rng)
        layers.gru_params(p, f"{dr}.rnn", e + d, h, rng)
    return p


@dataclass
class StepOut:
    estimate: Tensor  # fused estimate x_hat
    complement: Tensor  # observed where present, x_hat elsewhere
    hidden: Tensor
    loss: Tensor


def impute_step(x, m, d, h_prev, params: Params, direction: str, pe, feat_w, step: int = 0) -> StepOut:
    """One recurrence step; ``x``, ``m``, ``d`` are [N, D] arrays, ``pe`` is [E]."""
    p = direction
    gamma_h = decay(d, params[f"{p}.decay_h.W"], params[f"{p}.decay_h.b"])
    h = h_prev * gamma_h
    x_hist = nx.linear(h, params[f"{p}.hist.W"], params[f"{p}.hist.b"])
    keep = 1.0 - m
    x_c = nx.add(m * x, nx.mul(keep, x_hist))
    x_feat = nx.linear(x_c, feat_w, params[f"{p}.feat.b"])
    gamma_x = decay(d, params[f"{p}.decay_x.w"], params[f"{p}.decay_x.b"])
    beta = nx.sigmoid(nx.linear(nx.concat([gamma_x, m], axis=1), params[f"{p}.beta.W"], params[f"{p}.beta.b"]))
    x_hat = beta * x_feat + (1.0 - beta) * x_hist
    denom = float(m.sum()) + 1e-5
    err = nx.absolute(x_hist - x) + nx.absolute(x_feat - x) + nx.absolute(x_hat - x)
    loss = nx.scale(nx.total(nx.mul(err, m)), 1.0 / denom)
    comp = nx.add(m * x, nx.mul(keep, x_hat))
    emb = nx.add(nx.linear(comp, params["embed.W"], params["embed.b"]), pe)
    h_new = layers.gru_cell(nx.concat([emb, m], axis=1), h, params, f"{p}.rnn")
    if not (np.all(np.isfinite(h_new.data)) and np.all(np.isfinite(x_hat.data))):
        raise NumericalError(f"non-finite value in {direction} imputation step {step}")
    return StepOut(x_hat, comp, h_new, loss)


@dataclass
class ImputerOutput:
    imputed: np.ndarray  # [N, T, D]
    imputed_steps: list  # per-step [N, D] tensors of the final imputation
    hidden_last: dict  # direction -> [N, H] tensor
    hidden_seq: dict  # direction -> [N, T, H] array, time-aligned
    loss_reconstruction: Tensor
    loss_consistency: Tensor
    loss_eval: Tensor | None = None

    def total_loss(self, config: ImputerConfig) -> Tensor:
        loss = self.loss_reconstruction + nx.scale(self.loss_consistency, config.consistency_weight)
        if self.loss_eval is not None and config.eval_loss_weight:
            loss = loss + nx.scale(self.loss_eval, config.eval_loss_weight)
        return loss


def _run_direction(x, m, d, h0, params, direction, pe_rows, feat_w):
    h = h0
    steps = []
    for s in range(x.shape[1]):
        out = impute_step(x[:, s], m[:, s], d[:, s], h, params, direction, pe_rows[s], feat_w, s)
        h = out.hidden
        steps.append(out)
    return steps


def forward(batch: TimeSeriesBatch, params: Params, config: ImputerConfig) -> ImputerOutput:
    """Run both directions and merge them.

    Unobserved cells get the mean of the two directions' estimates, observed
    cells keep their input exactly.
    """
    n, t_len, d_feat = batch.values.shape
    if d_feat != config.d_features:
        raise ValueError(f"batch has {d_feat} features, imputer expects {config.d_features}")
    pe = positional_table(t_len, config.embed_dim)
    masks = {dr: Tensor(1.0 - np.eye(d_feat, dtype=np.float32)) for dr in DIRECTIONS}
    feat_w = {dr: nx.mul(params[f"{dr}.feat.W"], masks[dr]) for dr in DIRECTIONS}
    hid = params["fwd.hist.W"].shape[0]
    zeros = Tensor(np.zeros((n, hid), dtype=np.float32))

    x, m = batch.values, batch.mask
    fwd = _run_direction(x, m, batch.delta, zeros, params, "fwd", pe, feat_w["fwd"])
    if config.condition_initial_state:
        h0_b, _ = attention_condition([s.hidden for s in fwd], params["attn.W_k"], params["attn.q"])
    else:
        h0_b = zeros
    rev = batch.reversed()
    bwd = _run_direction(rev.values, rev.mask, rev.delta, h0_b, params, "bwd", pe[::-1], feat_w["bwd"])[::-1]

    steps = []
    consistency = []
    eval_terms = []
    has_eval = bool(np.any(batch.eval_mask > 0))
    for s in range(t_len):
        ms = m[:, s]
        merged = nx.scale(fwd[s].estimate + bwd[s].estimate, 0.5)
        final = nx.add(ms * x[:, s], nx.mul(1.0 - ms, merged))
        steps.append(final)
        consistency.append(nx.total(nx.absolute(fwd[s].complement - bwd[s].complement)))
        if has_eval:
            ev = batch.eval_mask[:, s]
            eval_terms.append(nx.total(nx.mul(nx.absolute(final - batch.ground_truth[:, s]), ev)))

    recon = _sum(s.loss for s in fwd) + _sum(s.loss for s in bwd)
    loss_eval = None
    if has_eval:
        loss_eval = nx.scale(_sum(eval_terms), 1.0 / (float(batch.eval_mask.sum()) + 1e-5))
    return ImputerOutput(
        imputed=np.stack([f.data for f in steps], axis=1),
        imputed_steps=steps,
        hidden_last={"fwd": fwd[-1].hidden, "bwd": bwd[0].hidden},
        hidden_seq={
            "fwd": np.stack([s.hidden.data for s in fwd], axis=1),
            "bwd": np.stack([s.hidden.data for s in bwd], axis=1),
        },
        loss_reconstruction=nx.scale(recon, 1.0 / t_len),
        loss_consistency=nx.scale(_sum(consistency), 1.0 / (n * t_len * d_feat)),
        loss_eval=loss_eval,
    )


def _sum(terms):
    out = None
    for t in terms:
        out = t if out is None else out + t
    return out


# ------------------------------------------------------------ checkpoints

CHECKPOINT_MAGIC = b"EHRTCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    """Imputer parameters plus the manifest needed to rebuild the model."""

    config: ImputerConfig
    arrays: dict
    epoch: int = 0
    val_metric: float | None = None
    extra: dict = field(default_factory=dict)

    def params(self) -> Params:
        p = init_params(self.config)
        p.load_arrays(self.arrays)
        return p

    def n_params(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def to_bytes(self) -> bytes:
        entries, blobs, offset = [], [], 0
        for name in sorted(self.arrays):
            a = np.ascontiguousarray(self.arrays[name], dtype="<f4")
            entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
            blobs.append(a.tobytes())
            offset += a.nbytes
        manifest = {
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "seed": self.config.seed,
            "epoch": self.epoch,
            "val_metric": self.val_metric,
            "arrays": entries,
            "extra": self.extra,
        }
        head = json.dumps(manifest, sort_keys=True).encode("utf-8")
        return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(head)) + head + b"".join(blobs)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError("not an imputer checkpoint (bad magic)")
        version, n = struct.unpack("<IQ", raw[8:20])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
        manifest = json.loads(raw[20 : 20 + n].decode("utf-8"))
        if manifest.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"manifest version {manifest.get('format_version')}, expected {CHECKPOINT_VERSION}"
            )
        body = raw[20 + n :]
        arrays = {}
        for e in manifest["arrays"]:
            a = np.frombuffer(body, dtype="<f4", count=e["count"], offset=e["offset"])
            arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float32)
        return cls(ImputerConfig(**manifest["config"]), arrays, manifest["epoch"], manifest["val_metric"],
                   manifest.get("extra", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# ------------------------------------------------------------ pretraining


def infer(batch: TimeSeriesBatch, params: Params, config: ImputerConfig, chunk: int = 256) -> ImputerOutput:
    """Gradient-free forward over a large batch, processed in chunks."""
    outs = []
    with nx.no_grad():
        for start in range(0, batch.n, chunk):
            outs.append(forward(batch.subset(np.arange(start, min(start + chunk, batch.n))), params, config))
    if len(outs) == 1:
        return outs[0]
    return ImputerOutput(
        imputed=np.concatenate([o.imputed for o in outs]),
        imputed_steps=[],
        hidden_last={dr: Tensor(np.concatenate([o.hidden_last[dr].data for o in outs])) for dr in DIRECTIONS},
        hidden_seq={dr: np.concatenate([o.hidden_seq[dr] for o in outs]) for dr in DIRECTIONS},
        loss_reconstruction=Tensor(np.nan),
        loss_consistency=Tensor(np.nan),
    )


def eval_mae(batch: TimeSeriesBatch, params: Params, config: ImputerConfig) -> float:
    out = infer(batch, params, config)
    return imputation_metrics(out.imputed, batch.ground_truth, batch.eval_mask)["mae"]


@dataclass
class PretrainHistory:
    train_loss: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    best_epoch: int = 0


def pretrain(
    train_batch: TimeSeriesBatch,
    val_batch: TimeSeriesBatch,
    config: ImputerConfig,
    trainer: TrainerConfig,
    epochs: int | None = None,
) -> tuple[Checkpoint, PretrainHistory]:
    """Fit the imputer with Adam at ``trainer.lr`` and keep the best-validation state.

    The validation metric is MAE on the validation batch's eval mask; epoch 0
    is the initialisation, so zero epochs return the initial parameters.
    Early stopping uses ``trainer.early_stop_patience`` on that metric.
    """
    params = init_params(config)
    n_epochs = trainer.max_epochs if epochs is None else epochs
    rng = np.random.default_rng(trainer.seed)
    state = AdamState()
    hist = PretrainHistory()
    best = eval_mae(val_batch, params, config) if np.any(val_batch.eval_mask > 0) else math.inf
    hist.val_mae.append(best)
    best_arrays = params.arrays()
    for epoch in range(1, n_epochs + 1):
        total = 0.0
        for idx in minibatches(train_batch.n, trainer.batch_size, rng):
            params.zero_grad()
            loss = forward(train_batch.subset(idx), params, config).total_loss(config)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"pretraining diverged at epoch {epoch}; last finite epoch {epoch - 1}")
            adam_step(params, nx.backward(loss, params), state, trainer.lr)
            total += value * len(idx)
        hist.train_loss.append(total / train_batch.n)
        mae = eval_mae(val_batch, params, config) if np.any(val_batch.eval_mask > 0) else hist.train_loss[-1]
        hist.val_mae.append(mae)
        log.info("pretrain epoch %d: train loss %.4f, val MAE %.4f", epoch, hist.train_loss[-1], mae)
        if mae < best:
            best, hist.best_epoch, best_arrays = mae, epoch, params.arrays()
        if epoch - hist.best_epoch >= trainer.early_stop_patience:
            break
    ckpt = Checkpoint(config, best_arrays, epoch=hist.best_epoch,
                      val_metric=None if not math.isfinite(best) else float(best))
    return ckpt, hist
