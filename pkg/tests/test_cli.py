import json
import time

import pytest

from dwdgat import datagen, trainer
from dwdgat.cli import EXIT_CONFIG, EXIT_DATA, MANIFEST, main

SPEC = {"counts": [3, 3, 3], "timepoints": 2, "rho": 0.8, "signal": 1.0, "seed": 5}


@pytest.fixture
def spec_file(tmp_path):
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(SPEC))
    return p


@pytest.fixture
def dataset(tmp_path, spec_file):
    out = tmp_path / "gen"
    assert main(["generate", "--config", str(spec_file), "--profile", "mini", "--out", str(out)]) == 0
    return out / "dataset.bin"


def test_generate_writes_dataset_and_manifest(dataset):
    manifest = json.loads((dataset.parent / MANIFEST).read_text())
    assert manifest["dataset_sha256"] == datagen.dataset_hash(dataset)
    assert manifest["config"]["counts"] == [3, 3, 3]
    assert manifest["outputs"] == {"dataset": "dataset.bin"}
    assert sorted(p.name for p in dataset.parent.iterdir()) == ["dataset.bin", MANIFEST]


def test_generate_is_deterministic(tmp_path, spec_file, dataset):
    other = tmp_path / "again"
    assert main(["generate", "--config", str(spec_file), "--profile", "mini", "--out", str(other)]) == 0
    assert datagen.dataset_hash(other / "dataset.bin") == datagen.dataset_hash(dataset)


def test_generate_missing_field_names_it(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({k: v for k, v in SPEC.items() if k != "rho"}))
    assert main(["generate", "--config", str(p), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "'rho'" in capsys.readouterr().err


def test_generate_invalid_json_is_config_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert main(["generate", "--config", str(p)]) == EXIT_CONFIG


def test_output_root_from_environment(tmp_path, spec_file, monkeypatch):
    monkeypatch.setenv("DWDGAT_OUT", str(tmp_path / "root"))
    assert main(["generate", "--config", str(spec_file), "--profile", "mini"]) == 0
    assert (tmp_path / "root" / "dataset-seed5" / "dataset.bin").is_file()


def test_fuse_writes_one_csv_per_sample(tmp_path, dataset):
    out = tmp_path / "fused"
    assert main(["fuse", str(dataset), "--out", str(out)]) == 0
    files = sorted((out / "fused").glob("*.csv"))
    assert len(files) == 18
    lines = files[0].read_text().splitlines()
    assert lines[0].split(",")[:3] == ["roi", "surface_ratio", "net:FA"]
    assert len(lines) == 1 + 12 and all(len(l.split(",")) == 1 + 22 for l in lines)
    assert (out / MANIFEST).is_file()


def test_fuse_corrupt_dataset_exits_3(tmp_path, dataset, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(dataset.read_bytes()[:-100])
    assert main(["fuse", str(bad), "--out", str(tmp_path / "f")]) == EXIT_DATA
    assert "truncated" in capsys.readouterr().err


def test_fuse_missing_dataset_exits_3(tmp_path):
    assert main(["fuse", str(tmp_path / "nope.bin")]) == EXIT_DATA


def test_invalid_graph_mode_exits_2(dataset):
    with pytest.raises(SystemExit) as exc:
        main(["train", str(dataset), "--graph-mode", "bogus"])
    assert exc.value.code == 2


def test_unknown_config_field_exits_2(tmp_path, dataset):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"lerning_rate": 0.1}))
    assert main(["train", str(dataset), "--config", str(p), "--profile", "mini"]) == EXIT_CONFIG


def test_train_smoke_and_report(tmp_path, dataset, capsys):
    out = tmp_path / "run"
    start = time.perf_counter()
    code = main(["train", str(dataset), "--profile", "mini", "--folds", "2", "--epochs", "5",
                 "--graph-mode", "relationship", "--out", str(out)])
    assert code == 0
    assert time.perf_counter() - start < 120
    names = {p.name for p in out.iterdir()}
    assert {"metrics.json", "loss_history.csv", "roc_points.csv", MANIFEST} <= names
    manifest = json.loads((out / MANIFEST).read_text())
    assert manifest["config"]["epochs"] == 5 and manifest["config"]["graph_mode"] == "relationship"
    assert manifest["dataset_sha256"] == datagen.dataset_hash(dataset)
    capsys.readouterr()

    assert main(["report", str(out), "--cost"]) == 0
    text = capsys.readouterr().out
    doc = json.loads((out / "metrics.json").read_text())
    for key in trainer.METRIC_KEYS:
        s = doc["summary"][key]
        assert f"{key:<20}{100 * s['mean']:>9.2f}%{100 * s['std']:>9.2f}%" in text
    assert "GFLOPs" in text


def test_flags_override_config_file(tmp_path, dataset):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"epochs": 50, "folds": 3, "seed": 1}))
    out = tmp_path / "run"
    assert main(["train", str(dataset), "--config", str(p), "--profile", "mini",
                 "--epochs", "1", "--folds", "2", "--out", str(out)]) == 0
    cfg = json.loads((out / MANIFEST).read_text())["config"]
    assert (cfg["epochs"], cfg["folds"], cfg["seed"]) == (1, 2, 1)


def test_report_without_metrics_exits_3(tmp_path):
    assert main(["report", str(tmp_path)]) == EXIT_DATA
