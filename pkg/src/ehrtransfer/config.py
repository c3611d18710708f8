"""Run configuration: one JSON document, validated before any stage runs.

Unknown keys are rejected at every level.  ``RunConfig.model_json_schema()``
is the published schema; ``parse_config`` writes it next to the effective
configuration in the output directory.

Environment overrides (and only these): ``EHRTRANSFER_OUT_DIR`` replaces
``output_dir`` and ``EHRTRANSFER_PARALLELISM`` replaces ``parallelism``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import classifiers as cl
from .imputer import ImputerConfig
from .masking import MaskPlan
from .training import PlateauConfig, SearchSpec, TrainerConfig

ENV_OUT_DIR = "EHRTRANSFER_OUT_DIR"
ENV_PARALLELISM = "EHRTRANSFER_PARALLELISM"


class ConfigError(ValueError):
    """Configuration failed validation; the message names key and constraint."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSection(_Strict):
    name: str = "synthetic"
    events: Optional[str] = None  # default: <output_dir>/data/events.csv
    labels: Optional[str] = None  # default: <output_dir>/data/labels.csv
    features: Optional[list[str]] = None  # default: sorted feature names seen in events
    n_steps: int = Field(48, ge=1)


class SynthSection(_Strict):
    n: int = Field(500, ge=5)
    d: int = Field(8, ge=2)
    missing_rate: float = Field(0.4, ge=0, lt=1)
    sharpness: float = Field(8.0, gt=0)


class ImputerSection(_Strict):
    hidden: int = Field(108, ge=1)
    embed_dim: int = Field(64, ge=2)
    attention_heads: Literal[1] = 1
    consistency_weight: float = Field(0.1, ge=0)
    eval_loss_weight: float = Field(1.0, ge=0)
    condition_initial_state: bool = True

    @field_validator("embed_dim")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("must be even")
        return v


class PlateauSection(_Strict):
    factor: float = Field(0.2, gt=0, lt=1)
    patience: int = Field(15, ge=1)
    min_lr: float = Field(1e-5, gt=0)
    initial: float = Field(1e-3, gt=0)
    threshold: float = Field(1e-4, ge=0)


class TrainerSection(_Strict):
    max_epochs: int = Field(200, ge=0)
    batch_size: int = Field(64, ge=1)
    base_lr: float = Field(1e-5, gt=0)
    max_lr: float = Field(1e-3, gt=0)
    gamma: float = Field(0.9999, gt=0, le=1)
    step_size: Optional[int] = Field(None, ge=1)
    lr: float = Field(1e-3, gt=0)
    plateau: PlateauSection = PlateauSection()
    early_stop_patience: int = Field(25, ge=1)

    @model_validator(mode="after")
    def _ordered(self):
        if self.base_lr > self.max_lr:
            raise ValueError("base_lr must be <= max_lr")
        return self


class PretrainSection(_Strict):
    max_epochs: int = Field(50, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    early_stop_patience: int = Field(25, ge=1)


class MaskingSection(_Strict):
    rate: float = Field(0.10, gt=0, lt=1)
    mode: Literal["uniform", "inverse-missing-rate", "explicit"] = "inverse-missing-rate"
    weights: Optional[list[float]] = None


class SearchSection(_Strict):
    n_trials: int = Field(20, ge=1)
    lr_range: tuple[float, float] = (1e-5, 1e-3)
    rungs: tuple[int, ...] = (5, 15, 45)
    eta: int = Field(3, ge=2)


class PlanSection(_Strict):
    kind: Literal["MLP2", "MLP5", "LSTM1", "GRU1", "LINEAR"]
    policy: Literal["FROZEN", "UNFROZEN"] = "FROZEN"
    input_strategy: Optional[Literal["HIDDEN_STATES", "IMPUTED_WITH_HIDDEN_INIT", "RAW_WITH_HIDDEN_INIT"]] = None
    hidden_merge: Literal["concat", "mean"] = "concat"
    hidden_width: int = Field(128, ge=1)


def _default_plans():
    return [PlanSection(kind=k, policy=p) for p in ("FROZEN", "UNFROZEN") for k in ("MLP2", "MLP5", "LSTM1", "GRU1")]


class RunConfig(_Strict):
    seed: int = 0
    output_dir: str = "runs/default"
    parallelism: int = Field(1, ge=1)
    n_folds: int = Field(5, ge=3)
    dataset: DatasetSection = DatasetSection()
    synth: SynthSection = SynthSection()
    imputer: ImputerSection = ImputerSection()
    pretrain: PretrainSection = PretrainSection()
    masking: MaskingSection = MaskingSection()
    trainer: TrainerSection = TrainerSection()
    search: SearchSection = SearchSection()
    plans: list[PlanSection] = Field(default_factory=_default_plans)
    strategies: list[Literal["SEARCHED", "CYCLIC", "PLATEAU"]] = ["SEARCHED", "CYCLIC", "PLATEAU"]

    # -- conversions to the library's own types

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def events_path(self) -> Path:
        return Path(self.dataset.events) if self.dataset.events else self.out / "data" / "events.csv"

    def labels_path(self) -> Path:
        return Path(self.dataset.labels) if self.dataset.labels else self.out / "data" / "labels.csv"

    def imputer_config(self, d_features: int) -> ImputerConfig:
        return ImputerConfig(d_features=d_features, seed=self.seed, n_steps=self.dataset.n_steps,
                             **self.imputer.model_dump())

    def trainer_config(self) -> TrainerConfig:
        t = self.trainer.model_dump()
        t["plateau"] = PlateauConfig(**t["plateau"])
        return TrainerConfig(seed=self.seed, **t)

    def pretrain_config(self) -> TrainerConfig:
        return TrainerConfig(seed=self.seed, **self.pretrain.model_dump())

    def search_spec(self) -> SearchSpec:
        return SearchSpec(**self.search.model_dump())

    def mask_plan(self) -> MaskPlan:
        w = tuple(self.masking.weights) if self.masking.weights is not None else None
        return MaskPlan(rate=self.masking.rate, mode=self.masking.mode, per_feature_weights=w, seed=self.seed)

    def finetune_plans(self, imputer: ImputerConfig) -> list[cl.FinetunePlan]:
        return [
            cl.make_plan(p.kind, imputer, p.policy, p.input_strategy, p.hidden_merge, p.hidden_width)
            for p in self.plans
        ]


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        key = ".".join(str(x) for x in err["loc"]) or "<root>"
        lines.append(f"{key}: {err['msg']}")
    return "; ".join(lines)


def load_config(data: dict) -> RunConfig:
    """Validate a config mapping; environment overrides are applied on top."""
    data = dict(data)
    if os.environ.get(ENV_OUT_DIR):
        data["output_dir"] = os.environ[ENV_OUT_DIR]
    if os.environ.get(ENV_PARALLELISM):
        data["parallelism"] = os.environ[ENV_PARALLELISM]
    try:
        cfg = RunConfig.model_validate(data)
        # cross-field checks that live in the library types
        for p in cfg.plans:
            cl.make_plan(p.kind, ImputerConfig(d_features=1, hidden=cfg.imputer.hidden), p.policy,
                         p.input_strategy, p.hidden_merge, p.hidden_width)
        if cfg.masking.mode == "explicit":
            cfg.mask_plan()
        cfg.trainer_config()
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def parse_config(path, echo: bool = True) -> RunConfig:
    """Read, validate and (by default) echo the effective config into the output directory."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    cfg = load_config(data)
    if echo:
        echo_config(cfg)
    return cfg


def echo_config(cfg: RunConfig) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / "effective_config.json"
    path.write_text(dump_config(cfg), encoding="utf-8")
    (cfg.out / "config.schema.json").write_text(
        json.dumps(RunConfig.model_json_schema(), indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return path


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=1, sort_keys=True) + "\n"
