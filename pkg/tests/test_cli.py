import json

import numpy as np
import pytest

from s3net import cli
from s3net.config import ConfigError, RunConfig
from s3net.data import read_labels


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A toy dataset plus a trained checkpoint, shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    mp = pytest.MonkeyPatch()
    mp.chdir(root)
    assert cli.main(["make-toy", "--root", "toy-data", "--train-scans", "2", "--val-scans", "1", "--points", "1500"]) == 0
    assert cli.main(["freqs", "--config", "toy"]) == 0
    assert cli.main(["train", "--config", "toy", "--epochs", "1", "--log", "log.jsonl"]) == 0
    yield root
    mp.undo()


@pytest.fixture
def in_workdir(workdir, monkeypatch):
    monkeypatch.chdir(workdir)
    return workdir


def test_config_defaults():
    cfg = RunConfig()
    assert cfg.voxel_size == 0.05 and cfg.epochs == 120 and cfg.batch_size == 2
    assert cfg.train_sequences == [0, 1, 2, 3, 4, 5, 6, 7, 9, 10] and cfg.val_sequences == [8]
    assert cfg.optimizer.lr == 0.001 and cfg.optimizer.weight_decay == 0.0005
    assert (cfg.loss.lambda_wce, cfg.loss.lambda_geo) == (0.75, 0.25)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="foo"):
        RunConfig.from_dict({"foo": 1})


def test_config_round_trip():
    cfg = RunConfig.from_dict({"epochs": 3, "network": {"stem_channels": 8}})
    again = RunConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


def test_train_writes_log_and_checkpoint(in_workdir):
    records = [json.loads(l) for l in (in_workdir / "log.jsonl").read_text().splitlines()]
    assert any("loss" in r for r in records) and any("val_miou" in r for r in records)
    assert (in_workdir / "toy-run" / "model.ckpt").exists()
    manifest = json.loads((in_workdir / "toy-run" / "frequencies.json").read_text())
    assert len(manifest["classes"]) == 19


def test_infer_and_eval(in_workdir, capsys):
    assert cli.main(["infer", "--config", "toy", "--checkpoint", "toy-run/model.ckpt", "--sequence", "8", "--out", "preds"]) == 0
    pred = read_labels(in_workdir / "preds" / "000000.label")
    truth = read_labels(in_workdir / "toy-data/sequences/08/labels/000000.label")
    assert pred.shape == truth.shape
    capsys.readouterr()
    assert cli.main(["eval", "--pred", "preds", "--labels", "toy-data/sequences/08/labels"]) == 0
    assert "mIoU" in capsys.readouterr().out


def test_eval_identical_files_is_perfect(in_workdir, capsys):
    lab = "toy-data/sequences/08/labels/000000.label"
    assert cli.main(["eval", "--pred", lab, "--labels", lab]) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1].split()[-1] == "100.0"


def test_attention_export(in_workdir):
    scan = "toy-data/sequences/08/velodyne/000000.bin"
    assert cli.main(["attention", "--config", "toy", "--checkpoint", "toy-run/model.ckpt", "--scan", scan, "--out", "att"]) == 0
    idx = np.loadtxt(in_workdir / "att.txt", dtype=np.int64)
    assert idx.size == int(np.ceil(0.02 * 1500))


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 10 and "FAIL" not in out


@pytest.mark.parametrize(
    "argv, code, kind",
    [
        (["bogus"], 1, "usage"),
        (["train", "--config", "missing.yaml"], 1, "config"),
        (["eval", "--pred", "nope.label", "--labels", "nope.label"], 2, "data"),
    ],
)
def test_error_exit_codes(tmp_path, monkeypatch, capsys, argv, code, kind):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == code
    assert json.loads(capsys.readouterr().err)["error"] == kind


def test_bad_checkpoint_is_data_error(in_workdir, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"junk")
    argv = ["infer", "--config", "toy", "--checkpoint", str(bad), "--scan", "toy-data/sequences/08/velodyne/000000.bin", "--out", str(tmp_path / "p.label")]
    assert cli.main(argv) == 2
    assert "not a checkpoint" in capsys.readouterr().err
