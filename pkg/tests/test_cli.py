import json

import numpy as np
import pytest

from conftest import planted_dataset, write_config, write_csv
from icesearch.cli import ConfigError, RunConfig, cmd_baselines, main, pct
from icesearch.tabular import make_dataset

ENGINE = {"n_zero_shot": 2, "n_epochs": 2, "n_folds": 5, "roles": ["Nurse", "Pharmacist"]}
MODEL = {"kind": "logistic_regression"}


@pytest.fixture
def workspace(tmp_path):
    ds = planted_dataset(n=300, n_features=6, seed=3)
    write_csv(ds, tmp_path / "data.csv")
    (tmp_path / "script.json").write_text(json.dumps([["f0", "f1", "f2"], ["f3"], ["f1", "f4"]]))
    return tmp_path


def config(ws, **extra):
    fields = dict(data="data.csv", target="outcome", task_description="predicting the outcome",
                  engine=ENGINE, model=MODEL, script="script.json", seeds=[42, 43],
                  output_dir=str(ws / "out"), preprocessing={"smote": False})
    fields.update(extra)
    return write_config(ws / "cfg.json", **fields)


def test_pct_rounds_half_up():
    assert pct(0.1234565) == 12.346
    assert pct(0.5) == 50.0
    assert pct(1 / 3) == 33.333


def test_endpoint_and_script_are_exclusive(workspace, capsys):
    cfg = config(workspace, endpoint={"base_url": "http://127.0.0.1:1/v1", "model_name": "m"})
    with pytest.raises(ConfigError):
        RunConfig.load(cfg)
    assert main(["run", "--config", str(cfg)]) == 2
    assert "either" in capsys.readouterr().err


def test_unknown_key_and_bad_model(workspace):
    with pytest.raises(ConfigError, match="unknown config keys"):
        RunConfig.load(config(workspace, colour="blue"))
    with pytest.raises(ConfigError):
        RunConfig.load(config(workspace, model={"kind": "xgboost"}))


def test_config_paths_resolve_against_config_dir(workspace):
    rc = RunConfig.load(config(workspace))
    assert rc.data == str(workspace / "data.csv")
    assert rc.smote is False and rc.engine.n_epochs == 2


def test_rank_refuses_22_features(tmp_path, capsys):
    rng = np.random.default_rng(0)
    ds = make_dataset(rng.integers(0, 2, (40, 22)), [0, 1] * 20)
    write_csv(ds, tmp_path / "data.csv")
    cfg = write_config(tmp_path / "cfg.json", data="data.csv", target="outcome",
                       output_dir=str(tmp_path / "out"))
    assert main(["rank", "--config", str(cfg)]) == 2
    assert "impractical" in capsys.readouterr().err
    assert not (tmp_path / "out" / "ranktable.csv").exists()


def test_baselines_rows_and_ensemble(workspace):
    report = cmd_baselines(RunConfig.load(config(workspace, oracle=True)))
    for section in report["seeds"]:
        rows = section["baselines"]
        assert [r["method"] for r in rows] == ["decision_tree", "random_forest", "logistic",
                                               "fisher_score", "ensemble"]
        ens = rows[-1]
        assert ens["val_accuracy"] == max(r["val_accuracy"] for r in rows[:4])
        assert ens["source"] in {r["method"] for r in rows[:4]}
    assert report["average_ranks"]["n_subsets"] == 63
    assert (workspace / "out" / "baselines.md").exists()


def test_run_writes_all_outputs(workspace):
    cfg = config(workspace, seeds=[42, 43, 44, 45, 46])
    assert main(["run", "--config", str(cfg), "--oracle"]) == 0
    out = workspace / "out"
    report = json.loads((out / "report.json").read_text())
    assert [s["seed"] for s in report["seeds"]] == [42, 43, 44, 45, 46]
    agg = report["average_ranks"]
    assert agg["n_subsets"] == 63 and agg["ice_search"]["n_seeds"] == 5
    assert {"ensemble", "fisher_score"} <= set(agg)
    for s in report["seeds"]:
        assert s["winner"]["features"] == ["f0", "f1", "f2"]
    conv = (out / "convergence.csv").read_text().splitlines()
    assert conv[0] == "seed,epoch,mean_train_accuracy,mean_val_accuracy,pool_size"
    assert len(conv) == 1 + 5 * 2
    table = (out / "ranktable.csv").read_text().splitlines()
    assert len(table) == 1 + 5 * 63
    records = [json.loads(x) for x in (out / "transcript.jsonl").read_text().splitlines()]
    assert len(records) == 5 * (2 + 2 * 2)
    assert "# ICE-SEARCH run report" in (out / "report.md").read_text()


def test_replay_reproduces_report(workspace):
    cfg = config(workspace, seeds=[7])
    assert main(["run", "--config", str(cfg)]) == 0
    first = (workspace / "out" / "report.json").read_bytes()
    transcript = workspace / "saved.jsonl"
    transcript.write_bytes((workspace / "out" / "transcript.jsonl").read_bytes())
    assert main(["replay", "--config", str(cfg), "--transcript", str(transcript)]) == 0
    assert (workspace / "out" / "report.json").read_bytes() == first


def test_replay_mismatch_marks_seed_failed(workspace, capsys):
    cfg = config(workspace, seeds=[7])
    assert main(["run", "--config", str(cfg)]) == 0
    saved = workspace / "saved.jsonl"
    saved.write_bytes((workspace / "out" / "transcript.jsonl").read_bytes())
    assert main(["replay", "--config", str(cfg), "--transcript", str(saved), "--seeds", "8"]) == 1
    report = json.loads((workspace / "out" / "report.json").read_text())
    assert "ReplayMismatch" in report["seeds"][0]["error"]


def test_overrides(workspace):
    cfg = config(workspace, seeds=[42])
    assert main(["run", "--config", str(cfg), "--epochs", "1", "--model", "cart_tree",
                 "--selection-mode", "decision_randomized"]) == 0
    report = json.loads((workspace / "out" / "report.json").read_text())
    assert report["model"]["kind"] == "cart_tree"
    assert report["engine"]["n_epochs"] == 1
    assert report["seeds"][0]["selection_mode"] == "decision_randomized"


def test_missing_data_file(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", data="nope.csv", target="t")
    assert main(["baselines", "--config", str(cfg)]) == 2
