"""Tests for experiment configuration loading, overrides and provenance echo."""

import json

import pytest

from stablefit.core.config import (
    OUTPUT_ROOT_ENV,
    ExperimentConfig,
    config_from_manifest,
    load_config,
    output_root,
    parse_override,
)
from stablefit.core.provenance import Manifest, canonical_value, read_manifest
from stablefit.core.validate import ArtifactMissingError, ConfigError, StabilityValidationError


def test_defaults():
    config = ExperimentConfig()
    assert config.optim.alpha == 2e-5
    assert config.optim.bias_correction is False
    assert config.run.epochs == 3
    assert config.sweep.seeds == tuple(range(25))
    assert config.surface.resolution == 40
    assert config.probe.mask_rate == 0.15


def test_from_dict_types_and_tuples():
    config = ExperimentConfig.from_dict({
        "seed": 3,
        "optim": {"alpha": 1, "bias_correction": True},
        "sweep": {"seeds": [4, 5], "axes": [["epochs", [1, 2]]]},
        "surface": {"a_range": [-1, 2]},
    })
    assert config.seed == 3
    assert config.optim.alpha == 1.0 and isinstance(config.optim.alpha, float)
    assert config.sweep.seeds == (4, 5)
    assert config.sweep.axes == (("epochs", [1, 2]),)
    assert config.surface.a_range == (-1.0, 2.0)


def test_unknown_key_names_its_path():
    with pytest.raises(ConfigError, match=r"unknown config key: run\.nope") as info:
        ExperimentConfig.from_dict({"run": {"nope": 1}})
    assert info.value.path == "run.nope"
    with pytest.raises(ConfigError, match="unknown config key: extra"):
        ExperimentConfig.from_dict({"extra": {}})


@pytest.mark.parametrize("document,path", [
    ({"seed": 1.5}, "seed"),
    ({"optim": {"bias_correction": 1}}, "optim.bias_correction"),
    ({"run": {"batch_size": True}}, "run.batch_size"),
    ({"sweep": {"seeds": 3}}, "sweep.seeds"),
    ({"surface": {"a_range": [0.0]}}, "surface.a_range"),
    ({"data": {"profile": 7}}, "data.profile"),
])
def test_wrong_types_rejected(document, path):
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_dict(document)
    assert info.value.path == path


def test_invalid_model_section():
    with pytest.raises(ConfigError, match="not divisible") as info:
        ExperimentConfig.from_dict({"model": {"hidden_dim": 10, "num_heads": 4}})
    assert info.value.path == "model"


def test_section_post_init_errors_become_config_errors():
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_dict({"optim": {"beta1": 1.5}})
    assert info.value.path == "optim"


@pytest.mark.parametrize("overrides,path", [
    (["run.epochs=null"], "run.epochs"),
    (["pretrain.total_iterations=null"], "pretrain.epochs"),
])
def test_missing_run_length_names_its_path(overrides, path):
    with pytest.raises(ConfigError) as info:
        ExperimentConfig().with_overrides(overrides)
    assert info.value.path == path


def test_both_run_lengths_rejected():
    with pytest.raises(ConfigError, match="both set") as info:
        ExperimentConfig.from_dict({"run": {"epochs": 3, "total_iterations": 10}})
    assert info.value.path == "run.total_iterations"


def test_one_run_length_clears_the_other():
    config = ExperimentConfig().with_overrides(["run.total_iterations=50", "pretrain.epochs=2"])
    assert (config.run.epochs, config.run.total_iterations) == (None, 50)
    assert (config.pretrain.epochs, config.pretrain.total_iterations) == (2, None)
    assert ExperimentConfig.from_dict({"run": {"total_iterations": 50}}).run_config().total_iterations == 50


def test_invalid_run_config_is_a_config_error():
    config = ExperimentConfig().with_overrides(["run.eval_every=0"])
    with pytest.raises(ConfigError) as info:
        config.run_config()
    assert info.value.path == "run"


def test_parse_override():
    assert parse_override("optim.alpha=1e-3") == ("optim.alpha", 1e-3)
    assert parse_override("run.init_checkpoint=runs/a.bin") == ("run.init_checkpoint", "runs/a.bin")
    assert parse_override("sweep.seeds=[0,1]") == ("sweep.seeds", [0, 1])
    with pytest.raises(ConfigError):
        parse_override("optim.alpha")


def test_overrides_apply_in_order():
    config = ExperimentConfig().with_overrides(["optim.alpha=1e-3", "optim.alpha=5e-4", "sweep.seeds=[0,1,2]"])
    assert config.optim.alpha == 5e-4
    assert config.sweep.seeds == (0, 1, 2)


def test_unknown_override_path():
    with pytest.raises(ConfigError, match=r"unknown config path: optim\.gamma"):
        ExperimentConfig().with_overrides(["optim.gamma=1"])


def test_preset_replaces_optim_section():
    config = ExperimentConfig.from_dict({"optim": {"alpha": 1e-3}}).with_preset("roberta-like")
    assert config.optim.alpha == 2e-5
    assert config.optim.beta2 == 0.98
    assert config.optim.clip_norm is None
    with pytest.raises(StabilityValidationError, match="unknown optimizer preset"):
        ExperimentConfig().with_preset("gpt-like")


def test_load_config_precedence(tmp_path):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps({"optim": {"alpha": 1e-3}, "seed": 5}), encoding="utf-8")
    assert load_config(path).optim.alpha == 1e-3
    config = load_config(path, preset="bert-like", overrides=["optim.weight_decay_lambda=0.0"])
    assert config.optim.alpha == 2e-5
    assert config.optim.weight_decay_lambda == 0.0
    assert config.seed == 5


def test_load_config_errors(tmp_path):
    with pytest.raises(ArtifactMissingError):
        load_config(tmp_path / "absent.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(broken)


def test_run_and_pretrain_configs():
    config = ExperimentConfig.from_dict({
        "seed": 9,
        "optim": {"alpha": 3e-5},
        "pretrain": {"learning_rate": 1e-3, "bias_correction": True},
    })
    run = config.run_config()
    assert run.seed == 9 and run.adam.alpha == 3e-5 and run.epochs == 3
    pretrain = config.pretrain_config()
    assert pretrain.adam.alpha == 1e-3
    assert pretrain.adam.bias_correction is True
    assert pretrain.total_iterations == 600 and pretrain.epochs is None


def test_require_artifacts(tmp_path):
    with pytest.raises(ConfigError, match="surface needs surface.pretrained"):
        ExperimentConfig().require_artifacts("surface")

    present = tmp_path / "pt.bin"
    present.write_bytes(b"x")
    config = ExperimentConfig().with_overrides([
        f"probe.fine_tuned={present}",
        f"probe.pretrained={tmp_path / 'missing.bin'}",
    ])
    with pytest.raises(ArtifactMissingError) as info:
        config.require_artifacts("forgetting")
    assert info.value.path.endswith("missing.bin")

    assert ExperimentConfig().require_artifacts("finetune") == {}
    config = ExperimentConfig().with_overrides([f"run.init_checkpoint={present}"])
    assert config.require_artifacts("sweep") == {"run.init_checkpoint": present}


def test_config_round_trips_through_manifest(tmp_path):
    config = load_config(overrides=[
        "seed=4",
        "optim.bias_correction=true",
        "data.class_balance=[0.6,0.4]",
        'sweep.cells=[{"epochs": 2}]',
        "sweep.plan=custom",
    ])
    manifest = Manifest("sweep", "0.1.0")
    manifest.add_config(config.to_dict())
    manifest.write(tmp_path)

    entries = read_manifest(tmp_path)
    assert list(entries)[:3] == ["tool", "version", "command"]
    assert entries["config.optim.bias_correction"] == "true"
    assert config_from_manifest(tmp_path) == config


def test_manifest_is_byte_stable(tmp_path):
    def render():
        manifest = Manifest("finetune", "0.1.0")
        manifest.add_config(ExperimentConfig().to_dict())
        manifest.add("lr", 0.1)
        return manifest.render()

    assert render() == render()
    assert "lr=0.1\n" in render()


def test_manifest_key_and_value_rules(tmp_path):
    manifest = Manifest("report", "0.1.0")
    with pytest.raises(StabilityValidationError):
        manifest.add("a=b", 1)
    assert canonical_value(None) == "null"
    assert canonical_value(True) == "true"
    assert canonical_value({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'
    assert canonical_value("two\nlines") == "two lines"
    with pytest.raises(ArtifactMissingError):
        read_manifest(tmp_path)


def test_output_root_precedence(monkeypatch):
    config = ExperimentConfig.from_dict({"output_dir": "from-config"})
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    assert str(output_root(config)) == "from-config"
    monkeypatch.setenv(OUTPUT_ROOT_ENV, "from-env")
    assert str(output_root(config)) == "from-env"
    assert str(output_root(config, "from-cli")) == "from-cli"
