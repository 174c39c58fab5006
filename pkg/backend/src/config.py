"""
Run configuration: defaults, YAML config files and command-line overrides.

Resolution order: built-in defaults < config file (`--config` or the
SNOJOE_CONFIG environment variable) < explicit command-line flags. The
resolved dictionary is embedded verbatim in every report.
"""

import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from backend.src.errors import ConfigError
from backend.src.processing.baselines import (
    IFOREST_SUBSAMPLE,
    IFOREST_TREES,
    LOF_NEIGHBORS,
    MAHALANOBIS_RIDGE,
    ODIN_EPSILON,
    ODIN_TEMPERATURE,
)
from backend.src.processing.data import DEFAULT_SPLIT_FRACTIONS, SyntheticSpec
from backend.src.processing.energy import DEFAULT_TARGET_TPR
from backend.src.processing.model import DEFAULT_LEARNING_RATE, ModelConfig

logger = logging.getLogger(__name__)

TOOLKIT_NAME = "snojoe"
TOOLKIT_VERSION = "1.0.0"
CONFIG_ENV_VAR = "SNOJOE_CONFIG"

# Benchmark sizes (train / ID val / ID test / OOD per regime)
DEFAULT_TRAIN_SAMPLES = 2000
DEFAULT_VAL_SAMPLES = 250
DEFAULT_TEST_SAMPLES = 500
DEFAULT_OOD_SAMPLES = 500
DEFAULT_MASTER_SEED = 20240601


@dataclass
class DataSection:
    num_labels: int = 10
    input_dim: int = 32
    samples: int = 2000
    label_prob: float = 0.3
    noise_sigma: float = 0.5
    prototype_scale: float = 2.0
    seed: int = 7
    ood_mode: str = "shift"
    shift_magnitude: float = 4.0
    ood_samples: int = DEFAULT_OOD_SAMPLES
    split_fractions: list = field(default_factory=lambda: list(DEFAULT_SPLIT_FRACTIONS))
    # benchmark / ablation sizes
    train_samples: int = DEFAULT_TRAIN_SAMPLES
    val_samples: int = DEFAULT_VAL_SAMPLES
    test_samples: int = DEFAULT_TEST_SAMPLES
    ood_modes: list = field(default_factory=lambda: ["shift", "sparse-label"])

    def synthetic_spec(self, samples=None, ood_mode=None):
        return SyntheticSpec(
            num_labels=self.num_labels,
            input_dim=self.input_dim,
            samples=self.samples if samples is None else samples,
            label_prob=self.label_prob,
            noise_sigma=self.noise_sigma,
            prototype_scale=self.prototype_scale,
            seed=self.seed,
            ood_mode=self.ood_mode if ood_mode is None else ood_mode,
            shift_magnitude=self.shift_magnitude,
        )


@dataclass
class ModelSection:
    hidden_dim: int = 64
    num_blocks: int = 3
    sn_layers: int = 2
    learning_rate: float = DEFAULT_LEARNING_RATE
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def model_config(self, input_dim, num_labels, **overrides):
        values = asdict(self)
        values.update(overrides)
        return ModelConfig(input_dim=input_dim, num_labels=num_labels, **values)


@dataclass
class MethodSection:
    target_tpr: float = DEFAULT_TARGET_TPR
    odin_temperature: float = ODIN_TEMPERATURE
    odin_epsilon: float = ODIN_EPSILON
    mahalanobis_ridge: float = MAHALANOBIS_RIDGE
    lof_k: int = LOF_NEIGHBORS
    iforest_trees: int = IFOREST_TREES
    iforest_subsample: int = IFOREST_SUBSAMPLE
    flip_aupr: bool = False


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    methods: MethodSection = field(default_factory=MethodSection)
    master_seed: int = DEFAULT_MASTER_SEED
    log_level: str = "INFO"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc or {})
        sections = {"data": DataSection, "model": ModelSection, "methods": MethodSection}
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in sections.items():
            values = doc.pop(name, None) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"config section '{name}' must be a mapping")
            bad = set(values) - {f.name for f in fields(section_cls)}
            if bad:
                raise ConfigError(f"unknown keys in config section '{name}': {sorted(bad)}")
            kwargs[name] = section_cls(**values)
        kwargs.update(doc)
        return cls(**kwargs)

    def with_overrides(self, overrides):
        """Apply {"section.key": value} overrides, skipping None values."""
        config = self
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, _, key = dotted.partition(".")
            if not key:
                config = replace(config, **{section: value})
                continue
            part = getattr(config, section)
            if key not in {f.name for f in fields(part)}:
                raise ConfigError(f"unknown config key {dotted!r}")
            config = replace(config, **{section: replace(part, **{key: value})})
        return config


def load_run_config(path=None):
    """Defaults merged with the YAML file at `path` or $SNOJOE_CONFIG."""
    path = path or os.environ.get(CONFIG_ENV_VAR)
    if not path:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {e}") from e
    logger.info("Loaded config from %s", path)
    try:
        return RunConfig.from_dict(doc)
    except TypeError as e:
        raise ConfigError(f"invalid config in {path}: {e}") from e


def dump_run_config(config, path):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)
