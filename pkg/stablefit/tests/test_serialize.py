"""Tests for checkpoint files, CSV tables and run trace directories."""

import numpy as np
import pytest

from stablefit.core.model import init_checkpoint
from stablefit.core.serialize import (
    MAGIC,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    format_cell,
    load_checkpoint,
    load_json,
    load_run_record,
    read_csv,
    save_checkpoint,
    save_json,
    write_csv,
    write_run_traces,
)
from stablefit.core.types import AdamState, EvalPoint, RunRecord
from stablefit.core.validate import ArtifactMissingError, StabilityValidationError


@pytest.fixture
def adam_state(tiny_checkpoint):
    state = AdamState.zeros(tiny_checkpoint.params)
    rng = np.random.default_rng(0)
    state.m = state.m.map(lambda name, a: rng.standard_normal(a.shape))
    state.v = state.v.map(lambda name, a: rng.random(a.shape))
    state.step = 17
    return state


def _record():
    return RunRecord(
        run_id="run:abc:s0",
        kind="finetune",
        config={"seed": 0},
        metric="accuracy",
        losses=[0.7, 0.65, 0.6],
        lrs=[1e-5, 2e-5, 1e-5],
        bias_correction_factors=[1.0, 1.0, 1.0],
        grad_norms={"layer0": [1.0, 0.5, 0.25], "classifier": [2.0, 1.0, 0.5]},
        evals=[EvalPoint(0, 0.5, 0.7), EvalPoint(3, 0.75, 0.6)],
        final_metric=0.75,
        final_train_loss=0.6,
        baseline=0.5,
        planned_iterations=3,
        dev_correct=[True, False, True, True],
    )


def test_checkpoint_round_trip_is_bitwise(tiny_checkpoint, adam_state):
    data = checkpoint_to_bytes(tiny_checkpoint, adam_state)
    assert data.startswith(MAGIC)

    loaded, state = checkpoint_from_bytes(data)
    assert loaded.config == tiny_checkpoint.config
    assert loaded.params.equal(tiny_checkpoint.params)
    assert loaded.hash() == tiny_checkpoint.hash()
    assert state.step == 17
    assert state.m.equal(adam_state.m)
    assert state.v.equal(adam_state.v)
    assert checkpoint_to_bytes(loaded, state) == data


def test_float32_checkpoint_keeps_dtype(tiny_config):
    checkpoint = init_checkpoint(tiny_config.replace(dtype="float32"), seed=2)
    loaded, state = checkpoint_from_bytes(checkpoint_to_bytes(checkpoint))
    assert state is None
    assert loaded.params.dtype == np.float32
    assert loaded.params.equal(checkpoint.params)


def test_provenance_survives(tiny_checkpoint):
    tiny_checkpoint.provenance = "pretrain run:x:s0"
    loaded, _ = checkpoint_from_bytes(checkpoint_to_bytes(tiny_checkpoint))
    assert loaded.provenance == "pretrain run:x:s0"


def test_bad_magic_rejected(tiny_checkpoint):
    data = b"NOTACKPT" + checkpoint_to_bytes(tiny_checkpoint)[8:]
    with pytest.raises(StabilityValidationError, match="bad magic"):
        checkpoint_from_bytes(data)


def test_unknown_version_rejected(tiny_checkpoint):
    data = bytearray(checkpoint_to_bytes(tiny_checkpoint))
    data[8:12] = (99).to_bytes(4, "little")
    with pytest.raises(StabilityValidationError, match="version 99"):
        checkpoint_from_bytes(bytes(data))


def test_truncated_checkpoint_rejected(tiny_checkpoint):
    data = checkpoint_to_bytes(tiny_checkpoint)
    with pytest.raises(StabilityValidationError, match="truncated"):
        checkpoint_from_bytes(data[:-5])


def test_save_and_load_checkpoint(tmp_path, tiny_checkpoint):
    path = save_checkpoint(tiny_checkpoint, tmp_path / "nested" / "checkpoint.bin")
    loaded, _ = load_checkpoint(path)
    assert loaded.params.equal(tiny_checkpoint.params)


def test_missing_checkpoint_is_artifact_error(tmp_path):
    with pytest.raises(ArtifactMissingError) as info:
        load_checkpoint(tmp_path / "absent.bin")
    assert info.value.path.endswith("absent.bin")


@pytest.mark.parametrize("value,expected", [
    (None, ""),
    (True, "true"),
    (np.bool_(False), "false"),
    (0.1, "0.1"),
    (np.float32(0.5), "0.5"),
    (3, "3"),
    ("rte", "rte"),
])
def test_format_cell(value, expected):
    assert format_cell(value) == expected


def test_csv_floats_parse_back_exactly(tmp_path):
    values = [0.1 + 0.2, 1e-17, 2.0 / 3.0]
    path = write_csv(tmp_path / "values.csv", ["i", "v"], enumerate(values))
    rows = read_csv(path)
    assert [float(r["v"]) for r in rows] == values
    assert path.read_bytes().count(b"\r") == 0


def test_json_round_trip_and_missing(tmp_path):
    save_json({"a": [1, 2.5]}, tmp_path / "doc.json")
    assert load_json(tmp_path / "doc.json") == {"a": [1, 2.5]}
    with pytest.raises(ArtifactMissingError):
        load_json(tmp_path / "missing.json")


def test_write_run_traces(tmp_path):
    record = _record()
    names = write_run_traces(record, tmp_path)
    assert names == ["loss.csv", "schedule.csv", "grad_norms.csv", "eval.csv", "dev_correct.csv", "record.json"]

    grad_rows = read_csv(tmp_path / "grad_norms.csv")
    assert list(grad_rows[0]) == ["iteration", "layer0", "classifier"]
    assert [r["classifier"] for r in grad_rows] == ["2.0", "1.0", "0.5"]
    eval_rows = read_csv(tmp_path / "eval.csv")
    assert [r["iteration"] for r in eval_rows] == ["0", "3"]
    assert read_csv(tmp_path / "dev_correct.csv")[1]["correct"] == "false"


def test_traces_without_dev_correct(tmp_path):
    record = _record()
    record.dev_correct = []
    assert "dev_correct.csv" not in write_run_traces(record, tmp_path)


def test_load_run_record_from_dir_or_file(tmp_path):
    record = _record()
    write_run_traces(record, tmp_path)
    assert load_run_record(tmp_path) == record
    assert load_run_record(tmp_path / "record.json") == record
