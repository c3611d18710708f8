"""Command-line stages: ingest, synth, pretrain, finetune, search, export-features, evaluate, report.

Every stage reads the same JSON config and exchanges artifacts through the
output directory, so stages can run in separate processes.  Exit codes: 0
success, 1 usage or config error, 2 runtime failure (including a missing
prerequisite artifact, whose expected path is printed).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import classifiers as cl
from .config import ConfigError, RunConfig, load_config, parse_config
from .dataset import (
    DataFormatError, HourlyGrid, bin_hourly, kfold_split, read_events_csv, read_labels_csv,
    synth_generate, write_events_csv, write_labels_csv,
)
from .evaluation import (
    CVSettings, MissingArtifactError, build_report, checkpoint_path, emit_report, ensure_checkpoint,
    fold_data, fold_imputation, finetune_run, load_run_records, run_name, save_run_record,
    summarise_imputation, MetricsReport,
)
from .imputer import Checkpoint
from .seeding import derive_seed
from .training import lr_search
from .evaluation import _search_objective

log = logging.getLogger("ehrtransfer")

STAGES = ("ingest", "synth", "pretrain", "finetune", "search", "export-features", "evaluate", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ----------------------------------------------------------------- helpers


def dataset_path(cfg: RunConfig) -> Path:
    return cfg.out / "dataset.npz"


def load_dataset(cfg: RunConfig) -> tuple[HourlyGrid, dict]:
    path = dataset_path(cfg)
    if not path.exists():
        raise MissingArtifactError(path, "run the ingest stage first")
    with np.load(path, allow_pickle=False) as z:
        ids = tuple(str(x) for x in z["ids"])
        grid = HourlyGrid(ids, tuple(str(x) for x in z["features"]), z["values"], z["mask"])
        labels = dict(zip(ids, (int(y) for y in z["labels"])))
    return grid, labels


def settings_for(cfg: RunConfig, d_features: int, allow_pretrain: bool) -> CVSettings:
    return CVSettings(
        imputer=cfg.imputer_config(d_features), pretrain=cfg.pretrain_config(), trainer=cfg.trainer_config(),
        search=cfg.search_spec(), mask=cfg.mask_plan(), n_folds=cfg.n_folds, seed=cfg.seed,
        dataset=cfg.dataset.name, allow_pretrain=allow_pretrain,
    )


def _folds(cfg: RunConfig, wanted: int | None):
    grid, labels = load_dataset(cfg)
    settings = settings_for(cfg, len(grid.features), allow_pretrain=False)
    folds = fold_data(grid, labels, settings)
    if wanted is not None:
        if not 0 <= wanted < len(folds):
            raise UsageError(f"--fold must be in 0..{len(folds) - 1}")
        folds = [folds[wanted]]
    return folds, settings


def _load_checkpoint(cfg: RunConfig, k: int) -> Checkpoint:
    path = checkpoint_path(cfg.out, k)
    if not path.exists():
        raise MissingArtifactError(path, "run the pretrain stage first")
    return Checkpoint.load(path)


def _map(fn, items, parallelism: int):
    if parallelism <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, items))


def _select_plans(cfg: RunConfig, settings: CVSettings, policy: str | None):
    plans = cfg.finetune_plans(settings.imputer)
    if policy:
        plans = [p for p in plans if p.weight_policy == policy.upper()]
    return plans


# ------------------------------------------------------------------ stages


def cmd_synth(cfg: RunConfig, args) -> None:
    s = cfg.synth
    data = synth_generate(s.n, cfg.dataset.n_steps, s.d, s.missing_rate, derive_seed(cfg.seed, "synth"),
                          sharpness=s.sharpness)
    out = cfg.out / "data"
    out.mkdir(parents=True, exist_ok=True)
    write_events_csv(out / "events.csv", data.events)
    write_labels_csv(out / "labels.csv", data.labels)
    (out / "synth_params.json").write_text(json.dumps(data.params, sort_keys=True, indent=1), encoding="utf-8")
    print(f"wrote {len(data.events)} events for {s.n} records to {out}")


def cmd_ingest(cfg: RunConfig, args) -> None:
    for p in (cfg.events_path(), cfg.labels_path()):
        if not p.exists():
            raise MissingArtifactError(p, "events/labels input file")
    events = read_events_csv(cfg.events_path())
    labels = read_labels_csv(cfg.labels_path())
    ids = sorted(labels)
    grid = bin_hourly(events, cfg.dataset.features, ids, cfg.dataset.n_steps)
    path = dataset_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, ids=np.array(grid.ids), features=np.array(grid.features), values=grid.values,
             mask=grid.mask, labels=np.array([labels[r] for r in grid.ids], dtype=np.int64))
    splits = kfold_split(grid.ids, cfg.n_folds, seed=derive_seed(cfg.seed, "folds"))
    (cfg.out / "folds.json").write_text(json.dumps(
        [{"fold": s.fold_index, "train": s.train_ids, "val": s.val_ids, "test": s.test_ids} for s in splits],
        indent=1), encoding="utf-8")
    print(f"ingested {len(grid.ids)} records x {len(grid.features)} features into {path}")


def _pretrain_fold(job):
    cfg_data, k = job
    cfg = load_config(cfg_data)
    grid, labels = load_dataset(cfg)
    settings = settings_for(cfg, len(grid.features), allow_pretrain=True)
    fold = fold_data(grid, labels, settings)[k]
    ensure_checkpoint(fold, settings, cfg.out)
    return k


def cmd_pretrain(cfg: RunConfig, args) -> None:
    folds, _ = _folds(cfg, args.fold)
    if args.force:
        for f in folds:
            checkpoint_path(cfg.out, f.split.fold_index).unlink(missing_ok=True)
    data = cfg.model_dump(mode="json")
    done = _map(_pretrain_fold, [(data, f.split.fold_index) for f in folds], cfg.parallelism)
    print("pretrained folds " + ", ".join(map(str, done)))


def _best_lrs(cfg: RunConfig) -> dict:
    path = cfg.out / "search" / "best_lr.json"
    return json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}


def _finetune_fold(job):
    cfg_data, k, policy, strategies = job
    cfg = load_config(cfg_data)
    folds, settings = _folds(cfg, k)
    fold = folds[0]
    ckpt = _load_checkpoint(cfg, k)
    best = _best_lrs(cfg)
    names = []
    for plan in _select_plans(cfg, settings, policy):
        for strategy in strategies:
            name = run_name(plan, strategy, k)
            search_log = None
            if strategy == "SEARCHED" and name not in best:
                search_log = cfg.out / "search" / f"{name}.jsonl"
                search_log.parent.mkdir(parents=True, exist_ok=True)
                search_log.unlink(missing_ok=True)
            rec, _ = finetune_run(ckpt, fold, plan, strategy, settings.trainer, settings.search, cfg.seed,
                                  cfg.dataset.name, search_log, best.get(name))
            save_run_record(rec, cfg.out)
            names.append(name)
    return names


def cmd_finetune(cfg: RunConfig, args) -> None:
    strategies = [args.strategy.upper()] if args.strategy else list(cfg.strategies)
    folds, _ = _folds(cfg, args.fold)
    for f in folds:  # fail fast, before any training
        _load_checkpoint(cfg, f.split.fold_index)
    data = cfg.model_dump(mode="json")
    jobs = [(data, f.split.fold_index, args.policy, strategies) for f in folds]
    names = [n for batch in _map(_finetune_fold, jobs, cfg.parallelism) for n in batch]
    print(f"finished {len(names)} fine-tuning runs")


def cmd_search(cfg: RunConfig, args) -> None:
    folds, settings = _folds(cfg, args.fold)
    best_path = cfg.out / "search" / "best_lr.json"
    best = _best_lrs(cfg)
    from dataclasses import replace
    for fold in folds:
        k = fold.split.fold_index
        ckpt = _load_checkpoint(cfg, k)
        for plan in _select_plans(cfg, settings, args.policy):
            keys = (k, plan.label, plan.weight_policy, "SEARCHED")
            tcfg = replace(settings.trainer, lr_strategy="SEARCHED", seed=derive_seed(cfg.seed, "batches", *keys))
            objective = _search_objective(ckpt, plan, fold, tcfg, derive_seed(cfg.seed, "head", *keys),
                                          settings.search)
            name = run_name(plan, "SEARCHED", k)
            log_path = cfg.out / "search" / f"{name}.jsonl"
            log_path.parent.mkdir(parents=True, exist_ok=True)
            log_path.unlink(missing_ok=True)
            res = lr_search(objective, settings.search, seed=derive_seed(cfg.seed, "search", *keys), log_path=log_path)
            best[name] = res.best_lr
            print(f"{name}: best lr {res.best_lr:.3e}")
    best_path.write_text(json.dumps(best, indent=1, sort_keys=True), encoding="utf-8")


def cmd_export(cfg: RunConfig, args) -> None:
    folds, _ = _folds(cfg, args.fold)
    splits = ("train", "val", "test") if args.split == "all" else (args.split,)
    for fold in folds:
        k = fold.split.fold_index
        ckpt = _load_checkpoint(cfg, k)
        for split in splits:
            path = cfg.out / "features" / f"fold{k}_{split}_{args.kind.lower()}.csv"
            cl.export_features(ckpt, fold.batch(split).natural(), args.kind.upper(), path)
            print(f"wrote {path}")


def cmd_evaluate(cfg: RunConfig, args) -> None:
    runs_dir = cfg.out / "runs"
    records = load_run_records(cfg.out) if runs_dir.exists() else []
    if not records:
        raise MissingArtifactError(runs_dir, "run the finetune stage first")
    folds, _ = _folds(cfg, None)
    imputation = [fold_imputation(_load_checkpoint(cfg, f.split.fold_index), f) for f in folds]
    strategies = sorted({r.strategy for r in records})
    report = build_report(records, {cfg.dataset.name: summarise_imputation(imputation)}, strategies)
    path = cfg.out / "report.json"
    path.write_text(report.to_json(), encoding="utf-8")
    print(f"evaluated {len(records)} runs into {path}")


def cmd_report(cfg: RunConfig, args) -> None:
    path = cfg.out / "report.json"
    if not path.exists():
        raise MissingArtifactError(path, "run the evaluate stage first")
    report = MetricsReport.from_json(path.read_text(encoding="utf-8"))
    for p in emit_report(report, cfg.out):
        log.info("wrote %s", p)
    print(f"report written to {cfg.out / 'report.md'}")


COMMANDS = {
    "ingest": cmd_ingest, "synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "search": cmd_search, "export-features": cmd_export, "evaluate": cmd_evaluate, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ehrtransfer", description="Pretrain an imputer and fine-tune classifiers on its outputs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "ingest": "bin events/labels CSVs into the hourly dataset",
        "synth": "generate a synthetic events/labels pair",
        "pretrain": "pretrain the imputer on each fold's training split",
        "finetune": "fine-tune classifier heads on pretrained imputers",
        "search": "learning-rate search with successive-halving pruning",
        "export-features": "write imputed series or hidden states as a feature table",
        "evaluate": "collect fine-tuning runs and imputation errors into report.json",
        "report": "render report.json as markdown and CSV tables",
    }
    for name in STAGES:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--config", required=True, help="run configuration JSON")
        if name in ("pretrain", "finetune", "search", "export-features"):
            p.add_argument("--fold", type=int, default=None, help="only this fold (default: all)")
        if name in ("finetune", "search"):
            p.add_argument("--policy", choices=["frozen", "unfrozen"], default=None)
        if name == "finetune":
            p.add_argument("--strategy", choices=["searched", "cyclic", "plateau"], default=None)
        if name == "pretrain":
            p.add_argument("--force", action="store_true", help="retrain even if a checkpoint exists")
        if name == "export-features":
            p.add_argument("--kind", choices=["hidden", "imputed"], required=True)
            p.add_argument("--split", choices=["train", "val", "test", "all"], default="all")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, MissingArtifactError) or Path(args.config).exists() else 1
    except (DataFormatError, OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
