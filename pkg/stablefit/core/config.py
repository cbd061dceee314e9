"""
Experiment configuration.

One JSON document drives every command. Sections are dataclasses; every
leaf is addressable by dotted path (``optim.alpha``, ``sweep.seeds``) and
type-checked on load. Unknown keys are rejected with the offending path.

Precedence, lowest first: dataclass defaults, config file, ``--preset``
(replaces the optim section), ``--set`` overrides, then command-line flags
such as ``--seed``. The output root is ``--out``, else the
``STABLEFIT_OUTPUT_ROOT`` environment variable, else ``output_dir``.
"""

import json
import os
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Tuple, Union

from .data import GrammarSpec, TaskSpec, dataset_profile
from .optim import preset as optimizer_preset
from .provenance import config_entries, read_manifest
from .types import AdamConfig, ModelConfig, RunConfig, ScheduleKind
from .validate import ArtifactMissingError, ConfigError, StabilityValidationError, validate_model_config

OUTPUT_ROOT_ENV = "STABLEFIT_OUTPUT_ROOT"


@dataclass(frozen=True)
class DataConfig:
    """
    Synthetic task and corpus generation.

    ``profile`` supplies sizes, class balance and metric; explicit
    ``train_size``/``dev_size``/``class_balance``/``metric`` win over it.
    """
    profile: str = "bench"
    scale: float = 1.0
    train_size: Optional[int] = None
    dev_size: Optional[int] = None
    class_balance: Optional[Tuple[float, ...]] = None
    metric: Optional[str] = None
    seed: int = 1234
    corpus_size: int = 2000
    num_states: int = 4
    stay_prob: float = 0.8
    emission_purity: float = 0.8
    zipf_exponent: float = 1.1
    grammar_seed: int = 1234
    marker_state: int = 0
    label_noise: float = 0.0

    def grammar(self, model: ModelConfig) -> GrammarSpec:
        return GrammarSpec(
            vocab_size=model.vocab_size,
            seq_len=model.max_seq_len,
            num_states=self.num_states,
            stay_prob=self.stay_prob,
            emission_purity=self.emission_purity,
            zipf_exponent=self.zipf_exponent,
            grammar_seed=self.grammar_seed,
        )

    def task(self, model: ModelConfig) -> Tuple[TaskSpec, int, int]:
        """(TaskSpec, train size, dev size) after resolving the profile."""
        profile = dataset_profile(self.profile, self.scale)
        spec = TaskSpec(
            grammar=self.grammar(model),
            class_balance=tuple(self.class_balance or profile["class_balance"]),
            metric=self.metric or profile["metric"],
            marker_state=self.marker_state,
            label_noise=self.label_noise,
        )
        return spec, self.train_size or profile["train_size"], self.dev_size or profile["dev_size"]


LENGTH_PAIRS = (("epochs", "total_iterations"), ("total_iterations", "epochs"))


def _check_length(section: Any) -> None:
    """Exactly one of epochs and total_iterations sets the run length."""
    if section.epochs is None and section.total_iterations is None:
        raise ConfigError("set one of epochs and total_iterations", path="epochs", expected="int")
    if section.epochs is not None and section.total_iterations is not None:
        raise ConfigError("epochs and total_iterations are both set; set the other to null",
                          path="total_iterations", expected="null")


@dataclass(frozen=True)
class ScheduleSection:
    warmup_ratio: float = 0.1
    kind: str = ScheduleKind.WARMUP_LINEAR.value


@dataclass(frozen=True)
class RunSection:
    """Fine-tuning run settings (the run seed is the top-level ``seed``)."""
    epochs: Optional[int] = 3
    total_iterations: Optional[int] = None
    batch_size: int = 16
    eval_every: int = 10
    dropout: Optional[float] = None
    train_subset: Optional[int] = None
    subset_seed: int = 0
    grad_norm_granularity: str = "layer"
    init_checkpoint: str = ""

    def __post_init__(self) -> None:
        _check_length(self)


@dataclass(frozen=True)
class PretrainSection:
    """Masked-LM pre-training; the optimizer is ``optim`` with the lr and correction given here."""
    epochs: Optional[int] = None
    total_iterations: Optional[int] = 600
    batch_size: int = 32
    learning_rate: float = 1e-3
    bias_correction: bool = True
    warmup_ratio: float = 0.1
    mask_rate: float = 0.15
    held_out_fraction: float = 0.1
    eval_every: int = 50
    init_seed: int = 0

    def __post_init__(self) -> None:
        _check_length(self)


@dataclass(frozen=True)
class SweepSection:
    """
    Sweep plan selection.

    ``plan`` names a bundled plan, ``downsample-matched``, or ``custom``
    (then ``axes`` and ``cells`` define it). ``group_by`` splits box plots
    by one override path.
    """
    plan: str = "baseline-contrast"
    seeds: Tuple[int, ...] = tuple(range(25))
    workers: int = 1
    lr_scale: float = 1.0
    subset_size: Optional[int] = None
    axes: Tuple[Tuple[Any, ...], ...] = ()
    cells: Tuple[Dict[str, Any], ...] = ()
    group_by: str = ""


@dataclass(frozen=True)
class SurfaceSection:
    pretrained: str = ""
    failed: str = ""
    successful: str = ""
    a_range: Tuple[float, float] = (-1.5, 1.5)
    b_range: Tuple[float, float] = (-1.5, 1.5)
    resolution: int = 40
    batch_size: int = 128
    batch_seed: int = 0
    head_seed: int = 0
    quantities: Tuple[str, ...] = ("loss", "gradient-norm")
    workers: int = 1


@dataclass(frozen=True)
class ProbeSection:
    fine_tuned: str = ""
    pretrained: str = ""
    mask_seed: int = 0
    mask_rate: float = 0.15
    eval_corpus_size: int = 256
    corpus_seed: int = 4321
    workers: int = 1


SECTIONS = {
    "model": ModelConfig,
    "data": DataConfig,
    "optim": AdamConfig,
    "schedule": ScheduleSection,
    "run": RunSection,
    "pretrain": PretrainSection,
    "sweep": SweepSection,
    "surface": SurfaceSection,
    "probe": ProbeSection,
}

REQUIRED_ARTIFACTS = {
    "pretrain": (),
    "finetune": (),
    "sweep": (),
    "surface": ("surface.pretrained", "surface.failed", "surface.successful"),
    "forgetting": ("probe.fine_tuned", "probe.pretrained"),
}
OPTIONAL_ARTIFACTS = {
    "finetune": ("run.init_checkpoint",),
    "sweep": ("run.init_checkpoint",),
}


# ---------------------------------------------------------------------------
# Typed conversion
# ---------------------------------------------------------------------------

def _type_name(hint: Any) -> str:
    return getattr(hint, "__name__", None) or str(hint).replace("typing.", "")


def _coerce(value: Any, hint: Any, path: str) -> Any:
    """Check ``value`` against a field annotation; lists become tuples for Tuple fields."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if hint is Any:
        return value
    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}", path=path, expected=_type_name(hint))
        if origin is tuple and len(args) == 2 and args[1] is Ellipsis:
            items = tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        elif origin is tuple and args:
            if len(value) != len(args):
                raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}",
                                  path=path, expected=_type_name(hint))
            items = tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
        else:
            items = tuple(value)
        return items if origin is tuple else list(items)
    if origin is dict or hint is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {value!r}", path=path, expected="dict")
        return dict(value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {value!r}", path=path, expected="bool")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {value!r}", path=path, expected="int")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected float, got {value!r}", path=path, expected="float")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected str, got {value!r}", path=path, expected="str")
        return value
    return value


def _build_section(cls: type, data: Any, path: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {data!r}", path=path, expected="object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key: {path}.{key}", path=f"{path}.{key}", expected="one of " + ", ".join(sorted(known)))
    kwargs = {key: _coerce(value, hints[key], f"{path}.{key}") for key, value in data.items()}
    for given, other in LENGTH_PAIRS:
        # a document naming only one length field leaves the other unset
        if other in known and kwargs.get(given) is not None and other not in data:
            kwargs[other] = None
    try:
        section = cls(**kwargs)
    except ConfigError as exc:
        leaf = f"{path}.{exc.path}" if exc.path else path
        raise ConfigError(f"{leaf}: {exc}", path=leaf, expected=exc.expected) from exc
    except StabilityValidationError as exc:
        raise ConfigError(f"{path}: {exc}", path=path, expected=cls.__name__) from exc
    if cls is ModelConfig:
        errors = validate_model_config(section)
        if errors:
            raise ConfigError(f"{path}: " + "; ".join(errors), path=path, expected="ModelConfig")
    return section


def _section_dict(section: Any) -> Dict[str, Any]:
    return json.loads(json.dumps(asdict(section)))


def parse_override(text: str) -> Tuple[str, Any]:
    """
    Parse ``dotted.path=value``; the value is JSON, or a bare string if it is not valid JSON.

    Raises:
        ConfigError: Missing ``=`` or empty path
    """
    path, sep, raw = text.partition("=")
    path = path.strip()
    if not sep or not path:
        raise ConfigError(f"override must look like path=value, got {text!r}", path=path, expected="path=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


# ---------------------------------------------------------------------------
# ExperimentConfig
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """The full experiment document."""
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: AdamConfig = field(default_factory=AdamConfig)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    run: RunSection = field(default_factory=RunSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    surface: SurfaceSection = field(default_factory=SurfaceSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    seed: int = 0
    output_dir: str = "output"

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {}
        for name in SECTIONS:
            data[name] = _section_dict(getattr(self, name))
        data["seed"] = self.seed
        data["output_dir"] = self.output_dir
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        """
        Raises:
            ConfigError: Unknown key or wrongly typed value, naming its dotted path
        """
        if not isinstance(data, dict):
            raise ConfigError("config document must be an object", path="", expected="object")
        known = set(SECTIONS) | {"seed", "output_dir"}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown config key: {key}", path=key, expected="one of " + ", ".join(sorted(known)))
        kwargs: Dict[str, Any] = {}
        for name, section_cls in SECTIONS.items():
            if name in data:
                kwargs[name] = _build_section(section_cls, data[name], name)
        if "seed" in data:
            kwargs["seed"] = _coerce(data["seed"], int, "seed")
        if "output_dir" in data:
            kwargs["output_dir"] = _coerce(data["output_dir"], str, "output_dir")
        return cls(**kwargs)

    def with_overrides(self, overrides: Sequence[str]) -> "ExperimentConfig":
        """Apply ``--set path=value`` strings in order."""
        data = self.to_dict()
        for text in overrides:
            path, value = parse_override(text)
            parts = path.split(".")
            node = data
            for part in parts[:-1]:
                if not isinstance(node, dict) or part not in node:
                    raise ConfigError(f"unknown config path: {path}", path=path, expected="existing key")
                node = node[part]
            if not isinstance(node, dict) or parts[-1] not in node:
                raise ConfigError(f"unknown config path: {path}", path=path, expected="existing key")
            node[parts[-1]] = value
            for given, other in LENGTH_PAIRS:
                if parts[-1] == given and value is not None and parts[0] in ("run", "pretrain"):
                    node[other] = None
        return ExperimentConfig.from_dict(data)

    def with_preset(self, name: str) -> "ExperimentConfig":
        adam, _ = optimizer_preset(name)
        return ExperimentConfig.from_dict({**self.to_dict(), "optim": adam.to_dict()})

    def get(self, path: str) -> Any:
        node: Any = self.to_dict()
        for part in path.split("."):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config path: {path}", path=path, expected="existing key")
            node = node[part]
        return node

    def run_config(self) -> RunConfig:
        """
        RunConfig for fine-tuning (single runs and sweep bases).

        Raises:
            ConfigError: The run section does not make a valid RunConfig
        """
        run = self.run
        return _run_config("run", lambda: RunConfig(
            seed=self.seed,
            epochs=run.epochs,
            total_iterations=run.total_iterations,
            batch_size=run.batch_size,
            eval_every=run.eval_every,
            adam=self.optim,
            warmup_ratio=self.schedule.warmup_ratio,
            schedule_kind=self.schedule.kind,
            dropout=run.dropout,
            dataset=self.data.profile,
            init_checkpoint=run.init_checkpoint,
            train_subset=run.train_subset,
            subset_seed=run.subset_seed,
            grad_norm_granularity=run.grad_norm_granularity,
        ))

    def pretrain_config(self) -> RunConfig:
        p = self.pretrain
        return _run_config("pretrain", lambda: RunConfig(
            seed=self.seed,
            epochs=p.epochs,
            total_iterations=p.total_iterations,
            batch_size=p.batch_size,
            eval_every=p.eval_every,
            adam=self.optim.replace(alpha=p.learning_rate, bias_correction=p.bias_correction),
            warmup_ratio=p.warmup_ratio,
            schedule_kind=self.schedule.kind,
            dataset="corpus",
            mask_rate=p.mask_rate,
            held_out_fraction=p.held_out_fraction,
        ))

    def require_artifacts(self, command: str) -> Dict[str, Path]:
        """
        Resolve and check the checkpoint paths a command reads.

        Returns:
            dotted path -> existing file

        Raises:
            ConfigError: A required path is empty
            ArtifactMissingError: A referenced file does not exist
        """
        found: Dict[str, Path] = {}
        for dotted in REQUIRED_ARTIFACTS.get(command, ()):
            value = self.get(dotted)
            if not value:
                raise ConfigError(f"{command} needs {dotted}", path=dotted, expected="checkpoint path")
            found[dotted] = Path(value)
        for dotted in OPTIONAL_ARTIFACTS.get(command, ()):
            value = self.get(dotted)
            if value:
                found[dotted] = Path(value)
        for dotted, path in found.items():
            if not path.is_file():
                raise ArtifactMissingError(f"{dotted}: file not found: {path}", path=str(path))
        return found


def _run_config(section: str, build: Callable[[], RunConfig]) -> RunConfig:
    try:
        return build()
    except StabilityValidationError as exc:
        raise ConfigError(f"{section}: {exc}", path=section, expected="RunConfig") from exc


def load_config(path: Optional[Union[str, Path]] = None, preset: Optional[str] = None,
                overrides: Sequence[str] = ()) -> ExperimentConfig:
    """
    Build an ExperimentConfig from an optional JSON file, preset and overrides.

    Raises:
        ArtifactMissingError: Config file does not exist
        ConfigError: Malformed document or override
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ArtifactMissingError(f"config file not found: {path}", path=str(path))
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}", path=str(path), expected="JSON object") from exc
    config = ExperimentConfig.from_dict(data)
    if preset:
        config = config.with_preset(preset)
    if overrides:
        config = config.with_overrides(overrides)
    return config


def config_from_manifest(path: Union[str, Path]) -> ExperimentConfig:
    """Reload the ExperimentConfig echoed into a manifest's ``config.*`` lines."""
    return ExperimentConfig.from_dict(config_entries(read_manifest(path)))


def output_root(config: ExperimentConfig, cli_out: Optional[str] = None) -> Path:
    return Path(cli_out or os.environ.get(OUTPUT_ROOT_ENV) or config.output_dir)

