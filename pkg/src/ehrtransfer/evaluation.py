"""Cross-validated fine-tuning runs and the tables/CSVs summarising them."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import classifiers as cl
from .dataset import FoldSplit, HourlyGrid, kfold_split
from .imputer import Checkpoint, ImputerConfig, infer, pretrain
from .masking import MaskPlan
from .metrics import auroc, imputation_metrics
from .pipeline import FoldData, prepare_fold
from .seeding import derive_seed
from .training import FitLoop, SearchSpec, TrainerConfig, lr_search, train

log = logging.getLogger(__name__)

STRATEGY_TITLES = {"SEARCHED": "Optuna-style search", "CYCLIC": "CyclicLR", "PLATEAU": "ReduceLROnPlateau"}
STRATEGY_ORDER = ("SEARCHED", "CYCLIC", "PLATEAU")


class MissingArtifactError(FileNotFoundError):
    """A stage needs an artifact an earlier stage should have written."""

    def __init__(self, path, hint: str = ""):
        super().__init__(f"missing artifact: {path}" + (f" ({hint})" if hint else ""))
        self.path = Path(path)


# ------------------------------------------------------------------ layout


def checkpoint_path(out_dir, fold: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"fold{fold}" / "imputer.ckpt"


def run_name(plan: cl.FinetunePlan, strategy: str, fold: int) -> str:
    label = plan.label.replace("/", "-")
    return f"{label}_{plan.weight_policy.lower()}_{strategy.lower()}_fold{fold}"


# --------------------------------------------------------------- one run


@dataclass
class RunRecord:
    fold: int
    model: str
    kind: str
    policy: str
    strategy: str
    dataset: str
    val_auroc: float
    test_auroc: float
    best_epoch: int
    epochs_run: int
    lr: float | None
    head_params: int
    trainable_params: int
    history: list = field(default_factory=list)

    def key(self) -> tuple:
        return (self.model, self.dataset, self.strategy, self.policy)


def _search_objective(checkpoint, plan, fold: FoldData, config: TrainerConfig, head_seed: int, spec: SearchSpec):
    train_b, val_b = fold.train.natural(), fold.val.natural()

    def objective(lr):
        model = cl.assemble(checkpoint, plan, seed=head_seed)
        loop = FitLoop(model, train_b, val_b, config, lr=lr)
        for epochs in spec.rungs:
            rec = None
            while len(loop.history.epochs) < epochs:
                rec = loop.step_epoch()
            yield rec.val_loss if rec is not None else loop.history.epochs[-1].val_loss

    return objective


def finetune_run(
    checkpoint: Checkpoint,
    fold: FoldData,
    plan: cl.FinetunePlan,
    strategy: str,
    trainer: TrainerConfig,
    search: SearchSpec,
    seed: int,
    dataset: str = "synthetic",
    search_log=None,
    searched_lr: float | None = None,
) -> tuple[RunRecord, cl.PipelineModel]:
    """Fine-tune on the fold's training split, select on val, score on test.

    All randomness comes from streams keyed by (fold, plan, policy,
    strategy), so a run does not depend on which other runs happen.
    """
    k = fold.split.fold_index
    keys = (k, plan.label, plan.weight_policy, strategy)
    head_seed = derive_seed(seed, "head", *keys)
    cfg = replace(trainer, lr_strategy=strategy, seed=derive_seed(seed, "batches", *keys))
    lr = None
    if strategy == "SEARCHED":
        lr = searched_lr
        if lr is None:
            objective = _search_objective(checkpoint, plan, fold, cfg, head_seed, search)
            lr = lr_search(objective, search, seed=derive_seed(seed, "search", *keys), log_path=search_log).best_lr
    model = cl.assemble(checkpoint, plan, seed=head_seed)
    hist = train(model, fold.train.natural(), fold.val.natural(), cfg, lr=lr)
    test = fold.test.natural()
    test_auc = auroc(cl.forward_classify(model, test), test.labels)
    imputer_total = checkpoint.n_params()
    rec = RunRecord(
        fold=k, model=plan.label, kind=plan.head.kind, policy=plan.weight_policy, strategy=strategy,
        dataset=dataset, val_auroc=float(hist.best_val_auroc), test_auroc=float(test_auc),
        best_epoch=hist.best_epoch, epochs_run=len(hist.epochs), lr=lr,
        head_params=cl.param_count(plan.head, "FROZEN"),
        trainable_params=cl.param_count(plan.head, plan.weight_policy, imputer_total),
        history=[asdict(e) for e in hist.epochs],
    )
    return rec, model


# ------------------------------------------------------------------ report


@dataclass
class ReportRow:
    model: str
    kind: str
    dataset: str
    policy: str
    strategy: str
    val_auroc: list
    test_auroc: list
    head_params: int
    trainable_params: int

    @property
    def mean_val(self) -> float:
        return float(np.mean(np.asarray(self.val_auroc, dtype=np.float64)))

    @property
    def mean_test(self) -> float:
        return float(np.mean(np.asarray(self.test_auroc, dtype=np.float64)))


@dataclass
class MetricsReport:
    rows: list
    imputation: dict  # dataset -> {"folds": [..], "mae": m, "rmse": m, "mre": m}
    strategies: list
    histories: dict = field(default_factory=dict)  # run name -> per-epoch dicts

    def to_json(self) -> str:
        return json.dumps(
            {"rows": [asdict(r) for r in self.rows], "imputation": self.imputation,
             "strategies": self.strategies, "histories": self.histories},
            sort_keys=True, indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        raw = json.loads(text)
        return cls([ReportRow(**r) for r in raw["rows"]], raw["imputation"], raw["strategies"], raw["histories"])

    def models(self) -> list[tuple[str, str, str]]:
        """Distinct (model, dataset, policy) triples in first-seen order."""
        seen = []
        for r in self.rows:
            key = (r.model, r.dataset, r.policy)
            if key not in seen:
                seen.append(key)
        return seen

    def row(self, model, dataset, policy, strategy) -> ReportRow:
        for r in self.rows:
            if (r.model, r.dataset, r.policy, r.strategy) == (model, dataset, policy, strategy):
                return r
        raise KeyError((model, dataset, policy, strategy))

    def average(self, model, dataset, policy) -> tuple[float, float]:
        """Mean over the strategy columns of the per-strategy fold means."""
        rows = [self.row(model, dataset, policy, s) for s in self.strategies]
        return float(np.mean([r.mean_val for r in rows])), float(np.mean([r.mean_test for r in rows]))


def build_report(records: Sequence[RunRecord], imputation: dict, strategies: Sequence[str]) -> MetricsReport:
    strategies = [s for s in STRATEGY_ORDER if s in strategies]
    groups: dict[tuple, list[RunRecord]] = {}
    for rec in sorted(records, key=lambda r: (r.dataset, r.model, r.policy, STRATEGY_ORDER.index(r.strategy), r.fold)):
        groups.setdefault(rec.key(), []).append(rec)
    rows = []
    for (model, dataset, strategy, policy), recs in groups.items():
        rows.append(ReportRow(
            model=model, kind=recs[0].kind, dataset=dataset, policy=policy, strategy=strategy,
            val_auroc=[r.val_auroc for r in recs], test_auroc=[r.test_auroc for r in recs],
            head_params=recs[0].head_params, trainable_params=recs[0].trainable_params,
        ))
    histories = {run_name_from_record(r): r.history for r in records}
    report = MetricsReport(rows, imputation, list(strategies), dict(sorted(histories.items())))
    for model, dataset, policy in report.models():
        for s in strategies:
            report.row(model, dataset, policy, s)  # every combination must be present
    return report


def run_name_from_record(rec: RunRecord) -> str:
    return f"{rec.model.replace('/', '-')}_{rec.policy.lower()}_{rec.strategy.lower()}_fold{rec.fold}"


def summarise_imputation(per_fold: list[dict]) -> dict:
    out = {"folds": per_fold}
    for key in ("mae", "rmse", "mre"):
        vals = [f[key] for f in per_fold]
        out[key] = float(np.mean(vals)) if vals and all(math.isfinite(v) for v in vals) else float("nan")
    return out


# -------------------------------------------------------------- driver


@dataclass
class CVSettings:
    imputer: ImputerConfig
    pretrain: TrainerConfig
    trainer: TrainerConfig
    search: SearchSpec
    mask: MaskPlan
    n_folds: int = 5
    seed: int = 0
    dataset: str = "synthetic"
    allow_pretrain: bool = True


def fold_data(grid: HourlyGrid, labels: dict, settings: CVSettings) -> list[FoldData]:
    splits = kfold_split(grid.ids, settings.n_folds, seed=derive_seed(settings.seed, "folds"))
    mask = settings.mask.with_seed(derive_seed(settings.seed, "mask"))
    return [prepare_fold(grid, labels, s, mask) for s in splits]


def ensure_checkpoint(fold: FoldData, settings: CVSettings, out_dir) -> Checkpoint:
    """Load the fold's imputer, pretraining it on the fold's training split if absent."""
    k = fold.split.fold_index
    path = checkpoint_path(out_dir, k) if out_dir is not None else None
    if path is not None and path.exists():
        return Checkpoint.load(path)
    if not settings.allow_pretrain:
        raise MissingArtifactError(path, "run the pretrain stage first")
    cfg = replace(settings.imputer, seed=derive_seed(settings.seed, "imputer", k))
    ptr = replace(settings.pretrain, seed=derive_seed(settings.seed, "pretrain", k))
    ckpt, hist = pretrain(fold.train, fold.val, cfg, ptr)
    if path is not None:
        ckpt.save(path)
        path.with_name("pretrain_history.json").write_text(
            json.dumps(asdict(hist), sort_keys=True, indent=1), encoding="utf-8")
    return ckpt


def fold_imputation(ckpt: Checkpoint, fold: FoldData) -> dict:
    out = infer(fold.test, ckpt.params(), ckpt.config)
    m = imputation_metrics(out.imputed, fold.test.ground_truth, fold.test.eval_mask)
    return {"fold": fold.split.fold_index, **m}


def run_cv(
    grid: HourlyGrid,
    labels: dict,
    plans: Sequence[cl.FinetunePlan],
    strategies: Sequence[str],
    settings: CVSettings,
    out_dir=None,
) -> MetricsReport:
    """Every fold x plan x strategy: fine-tune on train, select on val, score on test."""
    folds = fold_data(grid, labels, settings)
    records, imputation = [], []
    for fold in folds:
        ckpt = ensure_checkpoint(fold, settings, out_dir)
        imputation.append(fold_imputation(ckpt, fold))
        for plan in plans:
            for strategy in strategies:
                search_log = None
                if out_dir is not None and strategy == "SEARCHED":
                    search_log = Path(out_dir) / "search" / f"{run_name(plan, strategy, fold.split.fold_index)}.jsonl"
                    search_log.parent.mkdir(parents=True, exist_ok=True)
                    search_log.unlink(missing_ok=True)
                rec, _ = finetune_run(ckpt, fold, plan, strategy, settings.trainer, settings.search,
                                      settings.seed, settings.dataset, search_log)
                log.info("fold %d %s %s %s: val %.4f test %.4f", rec.fold, rec.model, rec.policy,
                         rec.strategy, rec.val_auroc, rec.test_auroc)
                records.append(rec)
                if out_dir is not None:
                    save_run_record(rec, out_dir)
    return build_report(records, {settings.dataset: summarise_imputation(imputation)}, strategies)


def save_run_record(rec: RunRecord, out_dir) -> Path:
    path = Path(out_dir) / "runs" / f"{run_name_from_record(rec)}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(asdict(rec), sort_keys=True, indent=1), encoding="utf-8")
    return path


def load_run_records(out_dir) -> list[RunRecord]:
    runs = sorted((Path(out_dir) / "runs").glob("*.json"))
    return [RunRecord(**json.loads(p.read_text(encoding="utf-8"))) for p in runs]


# ----------------------------------------------------------------- emit


def _f(x: float) -> str:
    return "nan" if not math.isfinite(x) else f"{x:.4f}"


def published_reference() -> str:
    """AUROC values reported in the original publication, as CSV text."""
    return resources.files("ehrtransfer").joinpath("data/published_auc.csv").read_text(encoding="utf-8")


def _markdown(report: MetricsReport) -> str:
    out = io.StringIO()
    out.write("# Fine-tuning results\n\n")
    out.write("Mean over folds of the best-validation checkpoint's AUROC.\n")
    for policy in ("FROZEN", "UNFROZEN"):
        models = [m for m in report.models() if m[2] == policy]
        if not models:
            continue
        out.write(f"\n## Imputer weights {policy.lower()}\n\n")
        head = ["Model", "Dataset"]
        for s in report.strategies:
            head += [f"{STRATEGY_TITLES[s]} Val AUC", f"{STRATEGY_TITLES[s]} Test AUC"]
        head += ["Average Val AUC", "Average Test AUC", "Head params"]
        out.write("| " + " | ".join(head) + " |\n")
        out.write("|" + "---|" * len(head) + "\n")
        for model, dataset, _ in models:
            cells = [model, dataset]
            for s in report.strategies:
                r = report.row(model, dataset, policy, s)
                cells += [_f(r.mean_val), _f(r.mean_test)]
            av, at = report.average(model, dataset, policy)
            cells += [_f(av), _f(at), str(report.row(model, dataset, policy, report.strategies[0]).head_params)]
            out.write("| " + " | ".join(cells) + " |\n")
    out.write("\n## Imputation error on held-out test cells\n\n| Dataset | MAE | RMSE | MRE |\n|---|---|---|---|\n")
    for dataset, m in sorted(report.imputation.items()):
        out.write(f"| {dataset} | {_f(m['mae'])} | {_f(m['rmse'])} | {_f(m['mre'])} |\n")
    out.write("\n## Per-fold AUROC\n\n| Model | Dataset | Policy | Strategy | Val per fold | Test per fold |\n")
    out.write("|---|---|---|---|---|---|\n")
    for r in report.rows:
        out.write(f"| {r.model} | {r.dataset} | {r.policy} | {r.strategy} | "
                  f"{', '.join(_f(v) for v in r.val_auroc)} | {', '.join(_f(v) for v in r.test_auroc)} |\n")
    out.write("\n## Published reference values (ICU datasets, not produced by this run)\n\n")
    ref = list(csv.reader(io.StringIO(published_reference())))
    out.write("| " + " | ".join(ref[0]) + " |\n|" + "---|" * len(ref[0]) + "\n")
    for row in ref[1:]:
        out.write("| " + " | ".join(row) + " |\n")
    return out.getvalue()


def emit_report(report: MetricsReport, out_dir) -> list[Path]:
    """Write report.md, report.csv, params_vs_auc.csv, folds.csv and histories/*.jsonl."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "histories").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write report to {out_dir}: {exc}") from exc
    written = []

    def put(name: str, text: str):
        path = out_dir / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        written.append(path)

    put("report.md", _markdown(report))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["model", "dataset", "policy"]
    for s in report.strategies:
        cols += [f"{s.lower()}_val_auc", f"{s.lower()}_test_auc"]
    w.writerow(cols + ["average_val_auc", "average_test_auc", "head_params", "trainable_params"])
    for model, dataset, policy in report.models():
        row = [model, dataset, policy]
        for s in report.strategies:
            r = report.row(model, dataset, policy, s)
            row += [_f(r.mean_val), _f(r.mean_test)]
        av, at = report.average(model, dataset, policy)
        first = report.row(model, dataset, policy, report.strategies[0])
        w.writerow(row + [_f(av), _f(at), first.head_params, first.trainable_params])
    put("report.csv", buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "dataset", "policy", "params", "avg_val_auroc", "avg_test_auroc"])
    for model, dataset, policy in report.models():
        av, at = report.average(model, dataset, policy)
        w.writerow([model, dataset, policy, report.row(model, dataset, policy, report.strategies[0]).head_params,
                    _f(av), _f(at)])
    put("params_vs_auc.csv", buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "dataset", "policy", "strategy", "fold", "val_auroc", "test_auroc"])
    for r in report.rows:
        for k, (v, t) in enumerate(zip(r.val_auroc, r.test_auroc)):
            w.writerow([r.model, r.dataset, r.policy, r.strategy, k, _f(v), _f(t)])
    put("folds.csv", buf.getvalue())

    for name, epochs in report.histories.items():
        put(f"histories/{name}.jsonl", "".join(json.dumps(e, sort_keys=True) + "\n" for e in epochs))
    put("report.json", report.to_json())
    return written
