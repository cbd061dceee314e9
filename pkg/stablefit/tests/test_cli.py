"""End-to-end tests for the stablefit command line."""

import json

import pytest

from stablefit.cli import main
from stablefit.core.provenance import read_manifest
from stablefit.core.serialize import load_checkpoint, load_run_record

TINY = {
    "model": {"num_layers": 1, "hidden_dim": 8, "num_heads": 2, "ffn_dim": 16, "vocab_size": 16,
              "max_seq_len": 6, "dropout_p": 0.0, "dtype": "float64"},
    "data": {"train_size": 32, "dev_size": 16, "corpus_size": 40},
    "optim": {"alpha": 1e-3},
    "run": {"epochs": 1, "batch_size": 16, "eval_every": 1},
    "pretrain": {"total_iterations": 4, "batch_size": 8, "eval_every": 2},
}


def _error(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    assert line.startswith("error: ")
    return json.loads(line[len("error: "):])


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(TINY), encoding="utf-8")
    return path


def test_no_command_prints_help(capsys):
    assert main([]) == 1
    assert "stablefit" in capsys.readouterr().out


def test_report_on_empty_dir(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", str(empty), "--out", str(tmp_path / "report")]) == 2
    payload = _error(capsys)
    assert payload["code"] == "artifact-missing"
    assert "no artifacts found" in payload["message"]


def test_unknown_config_key_exits_2(config_file, capsys):
    assert main(["finetune", "--config", str(config_file), "--set", "run.nope=1"]) == 2
    payload = _error(capsys)
    assert payload["code"] == "config"
    assert payload["path"] == "run.nope"


def test_missing_config_file_exits_2(tmp_path, capsys):
    assert main(["sweep", "--config", str(tmp_path / "absent.json")]) == 2
    assert _error(capsys)["code"] == "artifact-missing"


def test_surface_without_checkpoints_exits_2(config_file, tmp_path, capsys):
    assert main(["surface", "--config", str(config_file), "--out", str(tmp_path / "s")]) == 2
    assert _error(capsys)["path"] == "surface.pretrained"


def test_pretrain_then_finetune(config_file, tmp_path, capsys):
    pre = tmp_path / "pre"
    assert main(["pretrain", "--config", str(config_file), "--out", str(pre), "--quiet"]) == 0
    checkpoint, _ = load_checkpoint(pre / "checkpoint.bin")
    assert checkpoint.config.heads == ("mlm",)
    assert read_manifest(pre)["command"] == "pretrain"

    outs = []
    for name in ("ft_a", "ft_b"):
        out = tmp_path / name
        argv = ["finetune", "--config", str(config_file), "--out", str(out), "--seed", "3", "--quiet",
                "--set", f"run.init_checkpoint={pre / 'checkpoint.bin'}"]
        assert main(argv) == 0
        outs.append(out)

    record = load_run_record(outs[0])
    assert record.seed == 3
    assert record.iterations == 2
    manifest = read_manifest(outs[0])
    assert manifest["input.init"] == checkpoint.hash()
    assert manifest["config.seed"] == "3"
    assert "artifact.record.json" in manifest
    assert (outs[0] / "manifest.txt").read_bytes() == (outs[1] / "manifest.txt").read_bytes()

    report = tmp_path / "report"
    assert main(["report", str(outs[0]), "--out", str(report), "--quiet"]) == 0
    assert load_run_record(report) == record
    assert "Wrote" in capsys.readouterr().out


def test_invalid_run_length_exits_2(config_file, capsys):
    assert main(["finetune", "--config", str(config_file), "--set", "run.epochs=null"]) == 2
    payload = _error(capsys)
    assert payload["code"] == "config"
    assert payload["path"] == "run.epochs"
