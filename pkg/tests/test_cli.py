import json
import subprocess
import sys

import pytest

from ehrtransfer import classifiers as cl
from ehrtransfer.cli import STAGES, load_dataset, main, settings_for
from ehrtransfer.config import ConfigError, RunConfig, dump_config, load_config, parse_config
from ehrtransfer.evaluation import checkpoint_path, run_cv


def write_config(tmp_path, **overrides):
    cfg = {
        "seed": 3,
        "output_dir": str(tmp_path / "out"),
        "n_folds": 3,
        "synth": {"n": 36, "d": 3},
        "dataset": {"n_steps": 8},
        "imputer": {"hidden": 6, "embed_dim": 4},
        "pretrain": {"max_epochs": 2, "batch_size": 16},
        "trainer": {"max_epochs": 3, "batch_size": 16, "early_stop_patience": 2},
        "search": {"n_trials": 3, "rungs": [1, 2]},
        "plans": [{"kind": "MLP2"}, {"kind": "GRU1", "policy": "UNFROZEN"}],
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.mark.parametrize("stage", STAGES)
def test_help_exits_zero(stage, capsys):
    assert main([stage, "--help"]) == 0
    assert "--config" in capsys.readouterr().out


def test_top_level_help_and_usage_errors(capsys):
    assert main(["--help"]) == 0
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["pretrain"]) == 1  # --config missing


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "ehrtransfer", "finetune", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "--policy" in r.stdout


def test_defaults_applied_from_minimal_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 7, "output_dir": str(tmp_path / "o"),
                                "dataset": {"events": "e.csv", "labels": "l.csv"}}))
    cfg = parse_config(path)
    assert cfg.masking.rate == 0.10
    assert cfg.trainer.early_stop_patience == 25
    assert cfg.search.lr_range == (1e-5, 1e-3)
    assert cfg.trainer.plateau.patience == 15 and cfg.trainer.plateau.factor == 0.2
    assert cfg.imputer.hidden == 108 and cfg.n_folds == 5
    assert (tmp_path / "o" / "effective_config.json").exists()
    assert (tmp_path / "o" / "config.schema.json").exists()


def test_echoed_config_round_trips(tmp_path):
    cfg = parse_config(write_config(tmp_path))
    echoed = cfg.out / "effective_config.json"
    assert parse_config(echoed, echo=False) == cfg
    assert dump_config(load_config(json.loads(echoed.read_text()))) == echoed.read_text()


@pytest.mark.parametrize("bad,key", [
    ({"trainer": {"early_stop_patience": -1}}, "trainer.early_stop_patience"),
    ({"trainer": {"plateau": {"patience": 0}}}, "trainer.plateau.patience"),
    ({"surprise": 1}, "surprise"),
    ({"imputer": {"embed_dim": 5}}, "imputer.embed_dim"),
    ({"plans": [{"kind": "MLP2", "input_strategy": "RAW_WITH_HIDDEN_INIT"}]}, "MLP2"),
    ({"trainer": {"base_lr": 1.0}}, "base_lr"),
])
def test_invalid_configs_name_the_key(bad, key, tmp_path, capsys):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        load_config(bad)
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    assert main(["pretrain", "--config", str(path)]) == 1
    assert key.split(".")[-1] in capsys.readouterr().err


def test_environment_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("EHRTRANSFER_OUT_DIR", str(tmp_path / "env"))
    monkeypatch.setenv("EHRTRANSFER_PARALLELISM", "3")
    cfg = load_config({"output_dir": "elsewhere"})
    assert cfg.output_dir == str(tmp_path / "env") and cfg.parallelism == 3


def test_missing_artifacts_exit_2_with_path(tmp_path, capsys):
    path = write_config(tmp_path)
    assert main(["ingest", "--config", str(path)]) == 2
    assert str(tmp_path / "out" / "data" / "events.csv") in capsys.readouterr().err
    assert main(["synth", "--config", str(path)]) == 0
    assert main(["finetune", "--config", str(path)]) == 2
    assert str(tmp_path / "out" / "dataset.npz") in capsys.readouterr().err
    assert main(["ingest", "--config", str(path)]) == 0
    assert main(["finetune", "--config", str(path), "--policy", "frozen"]) == 2
    assert str(checkpoint_path(tmp_path / "out", 0)) in capsys.readouterr().err
    assert main(["report", "--config", str(path)]) == 2
    assert str(tmp_path / "out" / "report.json") in capsys.readouterr().err


def test_malformed_input_is_a_runtime_error(tmp_path, capsys):
    path = write_config(tmp_path, dataset={"events": str(tmp_path / "e.csv"), "labels": str(tmp_path / "l.csv")})
    (tmp_path / "e.csv").write_text("record_id,t_hours,feature,value\na,zz,hr,1\n")
    (tmp_path / "l.csv").write_text("record_id,label\na,1\n")
    assert main(["ingest", "--config", str(path)]) == 2
    assert "e.csv:2" in capsys.readouterr().err


def run_stages(path, *stages):
    for argv in stages:
        assert main([argv[0], "--config", str(path), *argv[1:]]) == 0, argv


def test_end_to_end_smoke(tmp_path):
    path = write_config(tmp_path)
    run_stages(path, ["synth"], ["ingest"], ["pretrain"], ["finetune", "--policy", "frozen"], ["evaluate"], ["report"])
    out = tmp_path / "out"
    for name in ("report.md", "report.csv", "params_vs_auc.csv", "folds.csv", "report.json", "folds.json"):
        assert (out / name).exists(), name
    runs = sorted(p.name for p in (out / "runs").glob("*.json"))
    assert len(runs) == 3 * 3 and all("_frozen_" in r for r in runs)
    run_stages(path, ["export-features", "--kind", "hidden", "--fold", "1", "--split", "test"])
    header = (out / "features" / "fold1_test_hidden.csv").read_text().splitlines()[0].split(",")
    assert len(header) == 2 * 6 + 2
    # nothing is written outside the output directory
    assert sorted(p.name for p in tmp_path.iterdir()) == ["config.json", "out"]


def test_stage_split_matches_single_process(tmp_path):
    path = write_config(tmp_path, strategies=["SEARCHED", "CYCLIC"])
    run_stages(path, ["synth"], ["ingest"], ["pretrain"], ["search", "--fold", "0"], ["finetune", "--fold", "0"],
               ["finetune", "--fold", "1"], ["finetune", "--fold", "2"], ["evaluate"])
    staged = (tmp_path / "out" / "report.json").read_text()

    cfg = parse_config(path, echo=False)
    grid, labels = load_dataset(cfg)
    settings = settings_for(cfg, len(grid.features), allow_pretrain=True)
    plans = cfg.finetune_plans(settings.imputer)
    single = run_cv(grid, labels, plans, ["SEARCHED", "CYCLIC"], settings, tmp_path / "single")
    assert single.to_json() == staged
    for k in range(3):
        assert checkpoint_path(tmp_path / "single", k).read_bytes() == checkpoint_path(cfg.out, k).read_bytes()


def test_parallel_pretrain_matches_serial(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    pa = write_config(a)
    pb = write_config(b, parallelism=2)
    for p in (pa, pb):
        run_stages(p, ["synth"], ["ingest"], ["pretrain"])
    for k in range(3):
        assert checkpoint_path(a / "out", k).read_bytes() == checkpoint_path(b / "out", k).read_bytes()


def test_head_counts_reported_for_configured_plans():
    cfg = RunConfig.model_validate({"plans": [{"kind": "LSTM1"}, {"kind": "MLP2", "hidden_merge": "mean"}]})
    plans = cfg.finetune_plans(cfg.imputer_config(35))
    assert [cl.param_count(p.head) for p in plans] == [76_721, 14_081]
