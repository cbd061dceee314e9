"""Tests for deterministic identifiers and content hashes."""

import numpy as np

from stablefit.core.ids import array_hash, cell_id, content_hash, digest, file_hash, run_id, tokens_hash


def test_digest_length():
    assert len(digest(b"abc")) == 16
    assert len(digest(b"abc", length=8)) == 8
    assert digest(b"abc").startswith(digest(b"abc", length=8))


def test_content_hash_ignores_key_order():
    assert content_hash({"a": 1, "b": [1, 2]}) == content_hash({"b": [1, 2], "a": 1})
    assert content_hash({"a": 1}) != content_hash({"a": 2})


def test_array_hash_sees_dtype_shape_and_names():
    a = np.arange(6, dtype=np.float64)
    base = array_hash({"w": a})
    assert array_hash({"w": a.copy()}) == base
    assert array_hash({"w": a.astype(np.float32)}) != base
    assert array_hash({"w": a.reshape(2, 3)}) != base
    assert array_hash({"v": a}) != base


def test_tokens_hash_separates_sequences():
    assert tokens_hash([[1, 2], [3]]) != tokens_hash([[1], [2, 3]])
    assert tokens_hash(np.array([[1, 2]])) == tokens_hash([[1, 2]])


def test_file_hash(tmp_path):
    path = tmp_path / "f.bin"
    path.write_bytes(b"payload")
    assert file_hash(path) == digest(b"payload")


def test_run_id_format():
    config = {"seed": 7, "epochs": 3}
    assert run_id(config) == f"run:{content_hash(config)}:s7"
    assert run_id(config) != run_id({"seed": 8, "epochs": 3})


def test_cell_id_labels():
    assert cell_id(0, {}) == "c000[base]"
    assert cell_id(3, {"epochs": 3, "adam.bias_correction": True}) == "c003[epochs=3,adam.bias_correction=on]"
    assert cell_id(12, {"adam.alpha": 2e-05}) == "c012[adam.alpha=2e-05]"
