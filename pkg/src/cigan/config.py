"""Run configuration: one YAML tree covering every stage, with strict
validation, defaults for all hyperparameters, and a canonical content hash."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError


@dataclass
class DataSection:
    n_samples: int = 4800
    resolution: int = 32
    split_fractions: list = field(default_factory=lambda: [0.8, 0.1, 0.1])


@dataclass
class ModelSection:
    d_z: int = 64
    d_w: int = 64
    mapping_layers: int = 4
    d_feature: int = 128  # oracle penultimate feature width
    d_embed: int = 64  # caption token embedding width
    use_noise: bool = False


@dataclass
class OracleSection:
    batch_size: int = 64
    lr: float = 2e-3
    max_epochs: int = 30
    target_accuracy: float = 0.99


@dataclass
class GanSection:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 2.5e-3
    beta1: float = 0.0
    beta2: float = 0.99
    r1_gamma: float = 1.0
    ema_decay: float = 0.999
    ema_enabled: bool = True
    log_interval: int = 25
    sample_interval: int = 500


@dataclass
class EncoderSection:
    steps: int = 900
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.99
    cycle_enabled: bool = True
    lambda_vgg: float = 0.00005
    lambda_adv_x: float = 0.08
    lambda_w: float = 0.01
    lambda_adv_w: float = 0.005
    r1_gamma: float = 1.0
    log_interval: int = 25
    sample_interval: int = 300


@dataclass
class AlignSection:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 2e-3
    temperature: float = 1.0
    log_interval: int = 50


@dataclass
class OptimizeSection:
    steps: int = 200
    step_size: float = 0.05
    lambda_percep: float = 1.0
    backtracking: bool = True
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class EvalSection:
    n_samples: int = 5000
    is_splits: int = 10
    mmd_samples: int = 1000
    mmd_bandwidth: float = 0.0  # 0 = median heuristic
    ablate_seeds: int = 3
    ablate_steps: int = 250


@dataclass
class TrainConfig:
    seed: int = 1
    deterministic: bool = False
    out_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    gan: GanSection = field(default_factory=GanSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    align: AlignSection = field(default_factory=AlignSection)
    optimize: OptimizeSection = field(default_factory=OptimizeSection)
    eval: EvalSection = field(default_factory=EvalSection)


_COERCIBLE = {int: (int,), float: (int, float), bool: (bool,), str: (str,), list: (list, tuple)}


def _build_section(cls, values, path):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(values).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(fields)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, f in fields.items():
        if name not in values:
            continue
        raw = values[name]
        here = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(f.type) or dataclasses.is_dataclass(f.default_factory() if f.default_factory is not dataclasses.MISSING else None):
            kwargs[name] = _build_section(_section_type(cls, name), raw, here)
            continue
        target = _scalar_type(cls, name)
        allowed = _COERCIBLE.get(target, (target,))
        if target is not bool and isinstance(raw, bool):
            raise ConfigError(f"{here}: expected {target.__name__}, got bool")
        if not isinstance(raw, allowed):
            raise ConfigError(f"{here}: expected {target.__name__}, got {type(raw).__name__} ({raw!r})")
        kwargs[name] = list(raw) if target is list else target(raw)
    return cls(**kwargs)


def _section_type(cls, name):
    for f in dataclasses.fields(cls):
        if f.name == name:
            if f.default_factory is not dataclasses.MISSING:
                probe = f.default_factory()
                if dataclasses.is_dataclass(probe):
                    return type(probe)
            return f.type
    raise KeyError(name)


def _scalar_type(cls, name):
    for f in dataclasses.fields(cls):
        if f.name == name:
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            return type(default)
    raise KeyError(name)


def _validate(cfg: TrainConfig) -> None:
    if cfg.data.resolution not in (32, 64):
        raise ConfigError(f"data.resolution must be 32 or 64, got {cfg.data.resolution}")
    if len(cfg.data.split_fractions) != 3 or abs(sum(cfg.data.split_fractions) - 1.0) > 1e-9:
        raise ConfigError("data.split_fractions must be three values summing to 1")
    for name in ("lambda_vgg", "lambda_adv_x", "lambda_w", "lambda_adv_w"):
        if getattr(cfg.encoder, name) < 0:
            raise ConfigError(f"encoder.{name} must be >= 0")
    if cfg.optimize.steps < 1:
        raise ConfigError("optimize.steps must be >= 1")
    if cfg.optimize.lambda_percep < 0:
        raise ConfigError("optimize.lambda_percep must be >= 0")
    if cfg.align.temperature <= 0:
        raise ConfigError("align.temperature must be positive")
    if cfg.eval.is_splits < 1:
        raise ConfigError("eval.is_splits must be >= 1")
    for sec, names in (("gan", ("steps", "batch_size")), ("encoder", ("steps", "batch_size")),
                       ("align", ("steps", "batch_size")), ("oracle", ("batch_size", "max_epochs"))):
        for name in names:
            if getattr(getattr(cfg, sec), name) < 0:
                raise ConfigError(f"{sec}.{name} must be >= 0")
    if cfg.gan.r1_gamma < 0 or cfg.encoder.r1_gamma < 0:
        raise ConfigError("r1_gamma must be >= 0")


def config_from_dict(values: dict) -> TrainConfig:
    cfg = _build_section(TrainConfig, values or {}, "")
    _validate(cfg)
    return cfg


def load_config(path=None, overrides=None) -> TrainConfig:
    """Load YAML (empty/missing content means all defaults), apply dotted-path
    overrides like `gan.steps=100`, validate, and return the config."""
    values = {}
    if path is not None:
        with open(str(path), encoding="utf-8") as f:
            try:
                loaded = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse {path}: {e}") from e
        if loaded is not None:
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            values = loaded
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, _, raw = item.partition("=")
        node = values
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} conflicts with a scalar entry")
        node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(values)


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
