import csv
import io
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ehrtransfer import classifiers as cl
from ehrtransfer.dataset import bin_hourly, synth_generate
from ehrtransfer.evaluation import (
    CVSettings, MissingArtifactError, MetricsReport, RunRecord, build_report, checkpoint_path, emit_report,
    published_reference, run_cv,
)
from ehrtransfer.imputer import ImputerConfig
from ehrtransfer.masking import MaskPlan
from ehrtransfer.metrics import auroc, imputation_metrics
from ehrtransfer.training import SearchSpec, TrainerConfig


def pair_count_auroc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auroc_examples():
    s = np.array([0.9, 0.8, 0.2, 0.1])
    assert auroc(s, [1, 1, 0, 0]) == 1.0
    assert auroc(s, [1, 0, 1, 0]) == 0.75
    assert auroc(np.full(6, 0.3), [1, 0, 1, 0, 0, 1]) == 0.5
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1, 2])


def test_auroc_matches_pair_counting_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, size=n)
        y[:2] = [0, 1]
        s = rng.integers(0, 10, size=n).astype(float)  # heavy ties
        assert auroc(s, y) == pytest.approx(pair_count_auroc(s, y), abs=1e-12)


@given(st.lists(st.integers(-1000, 1000), min_size=4, max_size=50, unique=True))
@settings(max_examples=100)
def test_auroc_rank_properties(scores):
    # integer scores keep the transform strictly monotone in floating point
    s = np.array(scores, dtype=float)
    y = (np.arange(len(s)) % 2).astype(int)
    a = auroc(s, y)
    assert auroc(np.exp(s / 100) * 5 + 1, y) == pytest.approx(a, abs=1e-12)
    assert a + auroc(-s, y) == pytest.approx(1.0, abs=1e-12)


def test_imputation_metric_examples():
    one = np.ones((1, 1, 1))
    assert imputation_metrics(2 * one, 4 * one, one) == {"mae": 2.0, "rmse": 2.0, "mre": 0.5}
    x = np.random.default_rng(1).normal(size=(3, 4, 2))
    assert imputation_metrics(x, x, np.ones_like(x)) == {"mae": 0.0, "rmse": 0.0, "mre": 0.0}
    assert math.isnan(imputation_metrics(one, 0 * one, one)["mre"])
    with pytest.raises(ValueError):
        imputation_metrics(one, one, 0 * one)


@given(st.integers(0, 10_000))
@settings(max_examples=50)
def test_rmse_at_least_mae(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 5, 3))
    sel = rng.uniform(size=a.shape) < 0.5
    sel.flat[0] = True
    m = imputation_metrics(a, b, sel)
    assert m["rmse"] >= m["mae"] - 1e-12


# ------------------------------------------------------------ CV driver

TINY_IMPUTER = ImputerConfig(d_features=3, hidden=6, embed_dim=4, n_steps=8)


def tiny_setup(n=40, seed=0):
    data = synth_generate(n, t=8, d=3, seed=seed)
    grid = bin_hourly(data.events, n_steps=8, record_ids=sorted(data.labels))
    settings = CVSettings(
        imputer=TINY_IMPUTER,
        pretrain=TrainerConfig(max_epochs=2, batch_size=16),
        trainer=TrainerConfig(max_epochs=3, batch_size=16, early_stop_patience=2),
        search=SearchSpec(n_trials=3, rungs=(1, 2)),
        mask=MaskPlan(),
        n_folds=5,
        seed=seed,
    )
    return grid, data.labels, settings


@pytest.fixture(scope="module")
def cv_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cv")
    grid, labels, settings = tiny_setup()
    plans = [cl.make_plan("MLP2", TINY_IMPUTER, "FROZEN")]
    report = run_cv(grid, labels, plans, ["SEARCHED", "CYCLIC", "PLATEAU"], settings, out)
    return out, report, (grid, labels, settings)


def test_run_counts_and_layout(cv_run):
    out, report, _ = cv_run
    assert len(list((out / "runs").glob("*.json"))) == 15
    assert len(report.histories) == 15
    assert all(checkpoint_path(out, k).exists() for k in range(5))
    assert len(list((out / "search").glob("*.jsonl"))) == 5
    assert [r.strategy for r in report.rows] == ["SEARCHED", "CYCLIC", "PLATEAU"]
    for r in report.rows:
        assert len(r.val_auroc) == 5
        assert abs(r.mean_val - sum(r.val_auroc) / 5) <= 1e-9


def test_average_column_is_mean_of_strategies(cv_run):
    _, report, _ = cv_run
    key = report.models()[0]
    av, at = report.average(*key)
    assert av == pytest.approx(np.mean([report.row(*key, s).mean_val for s in report.strategies]), abs=1e-12)
    assert at == pytest.approx(np.mean([report.row(*key, s).mean_test for s in report.strategies]), abs=1e-12)


def test_emit_report_files_and_determinism(tmp_path, cv_run):
    _, report, _ = cv_run
    a, b = tmp_path / "a", tmp_path / "b"
    emit_report(report, a)
    emit_report(MetricsReport.from_json(report.to_json()), b)
    for name in ("report.md", "report.csv", "params_vs_auc.csv", "folds.csv", "report.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert len(list((a / "histories").glob("*.jsonl"))) == 15
    rows = list(csv.DictReader(io.StringIO((a / "report.csv").read_text())))
    assert len(rows) == 1  # 1 model x 1 dataset (x 1 policy)
    row = rows[0]
    assert float(row["average_val_auc"]) == pytest.approx(
        np.mean([float(row[f"{s}_val_auc"]) for s in ("searched", "cyclic", "plateau")]), abs=2e-4)
    md = (a / "report.md").read_text()
    assert "Optuna-style search" in md and "CyclicLR" in md and "ReduceLROnPlateau" in md
    assert "Published reference values" in md


def test_emit_report_unwritable(tmp_path, cv_run):
    _, report, _ = cv_run
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    with pytest.raises(OSError, match="blocker"):
        emit_report(report, blocker / "out")


def _record(model, policy, strategy, fold, val, params):
    return RunRecord(fold, model, model, policy, strategy, "synthetic", val, val, 1, 1, None, params, params)


def test_params_column_uses_published_counts(tmp_path):
    imp = ImputerConfig(d_features=35)
    counts = {k: cl.param_count(cl.make_plan(k, imp, hidden_merge="mean" if k == "MLP2" else "concat").head)
              for k in ("MLP2", "LSTM1", "GRU1")}
    recs = [_record(k, "FROZEN", s, f, 0.5 + 0.01 * f, counts[k])
            for k in counts for s in ("SEARCHED", "CYCLIC", "PLATEAU") for f in range(5)]
    report = build_report(recs, {}, ["SEARCHED", "CYCLIC", "PLATEAU"])
    emit_report(report, tmp_path)
    rows = {r["model"]: int(r["params"]) for r in csv.DictReader((tmp_path / "params_vs_auc.csv").open())}
    assert rows == {"MLP2": 14_081, "LSTM1": 76_721, "GRU1": 61_061}


def test_build_report_requires_every_combination():
    recs = [_record("MLP2", "FROZEN", "SEARCHED", 0, 0.5, 1)]
    with pytest.raises(KeyError):
        build_report(recs, {}, ["SEARCHED", "CYCLIC"])


def test_plan_order_does_not_change_metrics(tmp_path):
    grid, labels, settings = tiny_setup(n=30, seed=3)
    settings = replace(settings, n_folds=3)
    plans = [cl.make_plan("MLP2", TINY_IMPUTER), cl.make_plan("LINEAR", TINY_IMPUTER)]
    a = run_cv(grid, labels, plans, ["CYCLIC"], settings, tmp_path / "a")
    b = run_cv(grid, labels, plans[::-1], ["CYCLIC"], settings, tmp_path / "b")
    assert a.to_json() == b.to_json()


def test_missing_checkpoint_with_pretraining_disabled(tmp_path):
    grid, labels, settings = tiny_setup(n=20)
    settings = replace(settings, allow_pretrain=False, n_folds=3)
    with pytest.raises(MissingArtifactError) as exc:
        run_cv(grid, labels, [cl.make_plan("MLP2", TINY_IMPUTER)], ["CYCLIC"], settings, tmp_path)
    assert str(checkpoint_path(tmp_path, 0)) in str(exc.value)


def test_test_labels_never_influence_training(tmp_path, cv_run):
    out, report, (grid, labels, settings) = cv_run
    from ehrtransfer.dataset import kfold_split
    from ehrtransfer.seeding import derive_seed
    split = kfold_split(grid.ids, 5, seed=derive_seed(settings.seed, "folds"))[0]
    flipped = dict(labels)
    for rid in split.test_ids:
        flipped[rid] = 1 - flipped[rid]
    plans = [cl.make_plan("MLP2", TINY_IMPUTER, "FROZEN")]
    other = run_cv(grid, flipped, plans, ["SEARCHED", "CYCLIC", "PLATEAU"], settings, tmp_path)
    assert checkpoint_path(tmp_path, 0).read_bytes() == checkpoint_path(out, 0).read_bytes()
    # fold 0's test block doubles as fold 4's validation block, so only fold 0 is comparable
    for r0, r1 in zip(report.rows, other.rows):
        assert r0.val_auroc[0] == r1.val_auroc[0]
        assert r1.test_auroc[0] == pytest.approx(1 - r0.test_auroc[0], abs=1e-12)
    fold0 = [k for k in report.histories if k.endswith("_fold0")]
    assert len(fold0) == 3
    assert all(report.histories[k] == other.histories[k] for k in fold0)


def test_published_reference_is_labelled():
    rows = list(csv.DictReader(io.StringIO(published_reference())))
    assert rows and all(r["source"] == "published (reference only)" for r in rows)
