"""Experiment configuration: one JSON document per run."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import POLICIES, parse_split
from .losses import LossConfig
from .model import ARCHITECTURES

MODES = ("base", "ghost", "ghost-svm", "ghost-real", "joint-oracle")
GHOST_MODES = ("ghost", "ghost-svm", "ghost-real")
SECTIONS = ("dataset", "scenario", "mode", "losses", "optimizer", "generator", "svm", "seed", "model")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "mnist"                  # mnist | synthetic
    path: str = "data/mnist"             # directory holding the four IDX files
    val_fraction: float | None = None    # carved out of train; None: 1/6 for MNIST, 0.2 otherwise
    limit_per_class: int | None = None   # optional training subsample
    data_seed: int = 0
    # synthetic only
    num_classes: int = 8
    attr_dim: int = 8
    input_dim: int = 32
    train_per_class: int = 200
    test_per_class: int = 100
    noise_scale: float = 1.0


@dataclass
class ScenarioConfig:
    split: str = "6+2+2"
    order: list[int] | None = None

    @property
    def sizes(self) -> list[int]:
        return parse_split(self.split)


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 90
    batch_size: int = 128
    finetune_epochs: int = 60
    finetune_lr: float = 1e-4
    grad_clip: float | None = None       # global gradient-norm cap for the main training
    memory_per_class: int = 20
    memory_policy: str = "closest-to-class-mean"


@dataclass
class GeneratorConfig:
    epochs: int = 1200
    lr: float = 1e-5
    hidden: list[int] = field(default_factory=lambda: [64, 128])
    noise_dim: int = 15
    count_per_class: int | None = None   # None: per-class real count of the last fit


@dataclass
class SvmConfig:
    C: float = 1.0
    max_per_class: int = 500
    epochs: int = 200
    balance: bool = True


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    mode: str = "base"
    losses: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    svm: SvmConfig = field(default_factory=SvmConfig)
    seed: int = 1
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode == "ghost-svm":
            self.losses.svm_reg = True
        self.validate()

    @property
    def ghost_source(self) -> str:
        return {"ghost": "gmmn", "ghost-svm": "gmmn", "ghost-real": "real-oracle"}.get(self.mode, "none")

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dataset.kind not in ("mnist", "synthetic"):
            raise ConfigError(f"unknown dataset kind {self.dataset.kind!r}")
        if self.ghost_source == "gmmn" and self.dataset.kind == "mnist":
            raise ConfigError(f"mode {self.mode!r} needs class attributes; MNIST has none")
        if self.losses.svm_reg and self.mode != "ghost-svm":
            raise ConfigError("losses.svm_reg is only meaningful in ghost-svm mode")
        if self.optimizer.memory_policy not in POLICIES:
            raise ConfigError(f"memory_policy must be one of {POLICIES}")
        if self.optimizer.kind not in ("sgd", "adam"):
            raise ConfigError("optimizer.kind must be sgd or adam")
        if self.optimizer.batch_size <= 0 or self.optimizer.epochs < 0 or self.optimizer.finetune_epochs < 0:
            raise ConfigError("batch size must be positive and epoch counts non-negative")
        if self.optimizer.memory_per_class < 0:
            raise ConfigError("memory_per_class must be non-negative")
        if self.optimizer.grad_clip is not None and self.optimizer.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")
        try:
            sizes = self.scenario.sizes
        except ValueError as exc:
            raise ConfigError(f"bad scenario split {self.scenario.split!r}") from exc
        if not sizes or min(sizes) <= 0:
            raise ConfigError("scenario split sizes must be positive")
        if self.model.get("name", self.default_arch) not in ARCHITECTURES:
            raise ConfigError(f"model.name must be one of {ARCHITECTURES}")

    @property
    def default_arch(self) -> str:
        return "mnist-2d" if self.dataset.kind == "mnist" else "mlp-synth"

    @property
    def arch(self) -> dict:
        arch = {"name": self.default_arch, **self.model}
        if arch["name"] == "mlp-synth":
            arch.setdefault("input_shape", [self.dataset.input_dim])
        return arch

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTION_TYPES = {
    "dataset": DatasetConfig,
    "scenario": ScenarioConfig,
    "losses": LossConfig,
    "optimizer": OptimizerConfig,
    "generator": GeneratorConfig,
    "svm": SvmConfig,
}


def _build(cls, raw, name):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r}: {exc}") from exc


def config_from_dict(raw: dict, seed: int | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    kwargs = {k: _build(cls, raw.get(k, {}), k) for k, cls in _SECTION_TYPES.items()}
    mode = raw.get("mode", "base")
    model = raw.get("model", {})
    if not isinstance(model, dict):
        raise ConfigError("section 'model' must be an object")
    run_seed = raw.get("seed", 1) if seed is None else seed
    if not isinstance(run_seed, int):
        raise ConfigError("seed must be an integer")
    return ExperimentConfig(mode=mode, seed=run_seed, model=dict(model), **kwargs)


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(raw, seed=seed)
