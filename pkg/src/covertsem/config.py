"""Experiment configuration: nested dataclasses, YAML files, dotted overrides.

YAML files may name a parent with `include: other.yaml` (path relative to the
including file); child keys win over included keys, recursively. Command-line
overrides use dotted paths, e.g. `loss.lambda_cts=2.0`, parsed as YAML
scalars.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import yaml

from .adversary import AttackerConfig
from .channel import ChannelConfig
from .errors import ConfigurationError
from .objectives import LossWeights

MODELS = (
    "proposed",
    "stacking_baseline",
    "noise_baseline",
    "standard_semcom",
    "random_path",
    "cosine_similarity_ablation",
)


@dataclass(frozen=True)
class EncoderSettings:
    input_channels: int = 3
    image_size: int = 64
    stage_channels: tuple = (16, 32, 64, 64)
    blocks_per_stage: int = 2
    kernel_size: int = 3


@dataclass(frozen=True)
class DecoderSettings:
    hidden: int = 64
    dilations: tuple = (1, 2)
    dropout: float = 0.1


@dataclass(frozen=True)
class DataSettings:
    n_train: int = 512
    n_val: int = 64
    n_test: int = 128
    n_attacker: int = 192
    base_seed: int = 1000
    num_classes: int = 4


@dataclass(frozen=True)
class TrainingSettings:
    policy_steps: int = 2000
    retrain_steps: int = 3000
    batch_size: int = 4
    num_sampled_architectures: int = 3
    policy_lr: float = 0.01
    weight_lr: float = 0.05
    momentum: float = 0.9
    grad_clip: float = 5.0
    tau_start: float = 5.0
    tau_end: float = 0.5
    policy_init_std: float = 1.0
    retrain_from_scratch: bool = False
    stop_gradient_anchor: bool = False
    log_every: int = 1

    def __post_init__(self):
        if self.policy_steps < 1 or self.retrain_steps < 1 or self.batch_size < 1:
            raise ConfigurationError("step and batch counts must be positive")
        if self.num_sampled_architectures < 1:
            raise ConfigurationError("num_sampled_architectures must be >= 1")
        if self.policy_init_std < 0.0:
            raise ConfigurationError("policy_init_std must be nonnegative")


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "proposed"
    seed: int = 0
    train_snr_db: float = 6.0
    eval_snrs: tuple = (-6.0, -3.0, 0.0, 3.0, 6.0)
    loss: LossWeights = field(default_factory=LossWeights)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    decoder: DecoderSettings = field(default_factory=DecoderSettings)
    data: DataSettings = field(default_factory=DataSettings)
    training: TrainingSettings = field(default_factory=TrainingSettings)
    attacker: AttackerConfig = field(default_factory=AttackerConfig)
    output_root: str = "runs"

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigurationError(f"model must be one of {MODELS}, got {self.model!r}")
        if len(self.eval_snrs) == 0:
            raise ConfigurationError("eval_snrs must not be empty")

    @property
    def train_channel(self):
        return self.channel.with_snr(self.train_snr_db)


_SECTION_TYPES = {
    "loss": LossWeights,
    "channel": ChannelConfig,
    "encoder": EncoderSettings,
    "decoder": DecoderSettings,
    "data": DataSettings,
    "training": TrainingSettings,
    "attacker": AttackerConfig,
}

_TUPLE_FIELDS = {"eval_snrs", "stage_channels", "dilations", "conv_channels"}


def _build_section(cls, data):
    if not isinstance(data, dict):
        raise ConfigurationError(f"section for {cls.__name__} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, (list, tuple)) else v
              for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data):
    """Build an ExperimentConfig from a (possibly partial) nested mapping."""
    data = dict(data or {})
    kwargs = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            kwargs[key] = _build_section(_SECTION_TYPES[key], value)
        elif key in _TUPLE_FIELDS and isinstance(value, (list, tuple)):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def config_to_dict(cfg):
    """Plain nested dict with lists instead of tuples (YAML/JSON friendly)."""

    def clean(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {f.name: clean(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, (list, tuple)):
            return [clean(v) for v in obj]
        return obj

    return clean(cfg)


def _deep_merge(base, override):
    out = dict(base)
    for key, value in override.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _read_yaml(path, seen=None):
    seen = seen or set()
    path = os.path.abspath(path)
    if path in seen:
        raise ConfigurationError(f"include cycle at {path}")
    seen = seen | {path}
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a mapping")
    include = data.pop("include", None)
    if include:
        base = _read_yaml(os.path.join(os.path.dirname(path), include), seen)
        data = _deep_merge(base, data)
    return data


def apply_overrides(data, overrides):
    """Apply dotted key=value overrides; values are parsed as YAML scalars."""
    out = json.loads(json.dumps(data))  # deep copy of plain structures
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} must look like section.key=value")
        dotted, _, raw = item.partition("=")
        keys = dotted.strip().split(".")
        node = out
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"cannot descend into {key!r} of override {item!r}")
        node[keys[-1]] = yaml.safe_load(raw)
    return out


def load_config(path=None, overrides=()):
    """Config from an optional YAML file plus dotted overrides."""
    data = _read_yaml(path) if path else {}
    data = apply_overrides(data, overrides)
    return config_from_dict(data)


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)


def config_hash(cfg):
    """Stable short hash of the full configuration."""
    canon = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:10]


def run_dir_name(cfg):
    """Directory name binding the configuration hash and the seed."""
    return f"{cfg.model}-{config_hash(cfg)}-s{cfg.seed}"
