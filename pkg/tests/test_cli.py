import csv

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from hefriendly.cli import main
from hefriendly.harness.data import DatasetSpec, load_dataset

TINY = {
    "model": "small_cnn",
    "dataset": {"name": "shapes", "train_size": 90, "val_size": 15, "test_size": 30},
    "arms": ["baseline_relu_maxpool", "tp_st_kd"],
    "seeds": [5],
    "epochs": 3,
    "transition": {"start_epoch": 0, "duration": 2},
}


@pytest.fixture
def cli():
    return CliRunner()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    result = CliRunner().invoke(main, ["train", "--config", str(cfg), "--out", str(root / "out")])
    assert result.exit_code == 0, result.output
    return root


def test_train_outputs(trained):
    out = trained / "out"
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert [(r["arm"], r["seed"]) for r in rows] == [
        ("baseline_relu_maxpool", "5"), ("tp_st_kd", "5"),
        ("baseline_relu_maxpool", "aggregate"), ("tp_st_kd", "aggregate")]
    assert (out / "tp_st_kd" / "seed5.ckpt").exists()
    assert (out / "dataset_seed5.json").exists()
    lams = [float(r["lambda"]) for r in csv.DictReader((out / "epochs.csv").open()) if r["arm"] == "tp_st_kd"]
    assert lams == [0.0, 0.5, 1.0]


def test_report(cli, trained):
    result = cli.invoke(main, ["report", "--in", str(trained / "out")])
    assert result.exit_code == 0
    assert "tp_st_kd" in result.output and "±" in result.output


def test_finalize_lint_eval(cli, trained, tmp_path):
    ckpt = trained / "out" / "tp_st_kd" / "seed5.ckpt"
    fin = tmp_path / "fin.ckpt"
    assert cli.invoke(main, ["finalize", str(ckpt), "-o", str(fin)]).exit_code == 0
    lint = cli.invoke(main, ["lint", str(fin)])
    assert lint.exit_code == 0 and lint.output == ""
    before = cli.invoke(main, ["eval", "--checkpoint", str(ckpt)]).output.split()
    after = cli.invoke(main, ["eval", "--checkpoint", str(fin)]).output.split()
    assert abs(float(before[1]) - float(after[1])) <= 1e-6


def test_finalize_rejects_baseline(cli, trained, tmp_path):
    ckpt = trained / "out" / "baseline_relu_maxpool" / "seed5.ckpt"
    result = cli.invoke(main, ["finalize", str(ckpt), "-o", str(tmp_path / "x.ckpt")])
    assert result.exit_code != 0
    assert "act1" in result.output


def test_fold_keeps_eval(cli, trained, tmp_path):
    ckpt = trained / "out" / "baseline_relu_maxpool" / "seed5.ckpt"
    folded = tmp_path / "f.ckpt"
    assert cli.invoke(main, ["fold", str(ckpt), "-o", str(folded)]).exit_code == 0
    a = cli.invoke(main, ["eval", "--checkpoint", str(ckpt)]).output.split()[1]
    b = cli.invoke(main, ["eval", "--checkpoint", str(folded)]).output.split()[1]
    assert abs(float(a) - float(b)) <= 1e-6


def test_eval_with_dataset_yaml(cli, trained, tmp_path):
    spec = tmp_path / "d.yaml"
    spec.write_text(yaml.safe_dump({"dataset": TINY["dataset"]}))
    ckpt = trained / "out" / "tp_st_kd" / "seed5.ckpt"
    result = cli.invoke(main, ["eval", "--checkpoint", str(ckpt), "--dataset", str(spec), "--seed", "5"])
    default = cli.invoke(main, ["eval", "--checkpoint", str(ckpt)])
    assert result.output == default.output


def test_lint_baseline_config(cli):
    result = cli.invoke(main, ["lint", "small_cnn"])
    assert result.exit_code == 1
    assert "pool1: max-pooling" in result.output


def test_depth_alexnet(cli, tmp_path):
    unfolded = cli.invoke(main, ["depth", "alexnet_he"])
    assert "multiplicative depth: 21" in unfolded.output
    folded = cli.invoke(main, ["depth", "alexnet_he", "--fold"])
    assert "multiplicative depth: 18" in folded.output
    conv = tmp_path / "c.yaml"
    conv.write_text("costs: {avg_pool: 0}\n")
    custom = cli.invoke(main, ["depth", "alexnet_he", "--fold", "--convention", str(conv)])
    assert "multiplicative depth: 15" in custom.output


def test_bad_config_exits_nonzero(cli, tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("arm: nope\n")
    result = cli.invoke(main, ["train", "--config", str(cfg), "--out", str(tmp_path)])
    assert result.exit_code == 2
    assert "nope" in result.output


def test_failed_run_exits_nonzero(cli, tmp_path):
    # Unnormalized inputs near 1e40 through three squares overflow float64.
    train, val, test = load_dataset(DatasetSpec(train_size=60, val_size=9, test_size=15), 0)
    data = tmp_path / "big.npz"
    np.savez(data, X_train=train.X * 1e40, y_train=train.y, X_val=val.X * 1e40, y_val=val.y,
             X_test=test.X * 1e40, y_test=test.y)
    model = tmp_path / "nobn.yaml"
    model.write_text(yaml.safe_dump({"input_shape": [1, 16, 16], "layers": [
        {"type": "conv2d", "out_channels": 2, "kernel": 3, "padding": "same", "activation": "relu"},
        {"type": "avg_pool", "window": 4, "stride": 4},
        {"type": "flatten"},
        {"type": "dense", "out_features": 4, "activation": "relu"},
        {"type": "dense", "out_features": 3, "activation": "relu"},
        {"type": "dense", "out_features": 3},
    ]}))
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({
        "model": str(model), "arms": ["square"], "seeds": [1], "epochs": 2, "warm_start": "scratch",
        "transition": {"start_epoch": 1, "duration": 1},
        "dataset": {"name": str(data), "train_size": 60, "val_size": 9, "test_size": 15, "normalize": False},
    }))
    result = cli.invoke(main, ["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert result.exit_code == 1, result.output
    assert "FAILED at epoch 1" in result.output
    rows = list(csv.DictReader((tmp_path / "o" / "metrics.csv").open()))
    assert rows[0]["test_acc"] == "failed"


def test_env_output_root(cli, tmp_path, monkeypatch):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({**TINY, "arms": ["baseline_relu_avgpool"], "epochs": 1}))
    monkeypatch.setenv("HEFRIENDLY_OUT", str(tmp_path / "envout"))
    result = cli.invoke(main, ["train", "--config", str(cfg), "--seeds", "3,4"])
    assert result.exit_code == 0, result.output
    rows = list(csv.DictReader((tmp_path / "envout" / "metrics.csv").open()))
    assert [r["seed"] for r in rows] == ["3", "4", "aggregate"]
