"""Typed experiment configuration: load from TOML/YAML, apply dotted-path
overrides, validate, and serialize a resolved snapshot."""

from __future__ import annotations

import copy
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

FUSION_STRATEGIES = ("gated", "weighted", "concat", "cross_attention")
DATASET_KINDS = ("beauty", "sports", "toys", "yelp", "ml1m")


class ConfigError(ValueError):
    """Raised for malformed, unknown, or out-of-range configuration."""


@dataclass
class DataConfig:
    dataset_path: str = ""
    semantic_path: str = ""      # empty: fall back to prompts_path or item-id pseudo-embeddings
    prompts_path: str = ""


@dataclass
class ModelConfig:
    d: int = 64
    layers: int = 2
    heads: int = 2
    dropout: float = 0.2
    tie_scoring: bool = True
    adapter_layers: int = 2
    adapter_activation: str = "gelu"
    dtype: str = "float32"


@dataclass
class SemanticConfig:
    d_prime: int = 1024          # width of bge-m3 style embeddings; tests use 32-64


@dataclass
class FusionSettings:
    strategy: str = "gated"
    weighted_alpha: float = 0.5
    weighted_alpha_learnable: bool = True
    ca_heads: int = 1
    gate_bias_init: float = 0.0


@dataclass
class IntentConfig:
    k: int = 16
    min_prefix: int = 2
    clustering_interval: int = 128
    max_fit_points: int = 50000
    kmeans_iters: int = 50


@dataclass
class DiffusionConfig:
    steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    hidden_width: int = 128
    time_embed_width: int = 32


@dataclass
class LossConfig:
    lambda_rec: float = 1.0
    lambda_diff: float = 1.0
    lambda_cl: float = 0.1
    lambda_align: float = 0.1
    temperature: float = 0.5


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 100
    patience: int = 10


@dataclass
class EvalConfig:
    ks: list[int] = field(default_factory=lambda: [5, 10])
    tail_fraction: float = 0.2
    cold_threshold: int = 5
    mask_train_items: bool = False
    silhouette: bool = True


@dataclass
class SeedConfig:
    init: int = 1
    data: int = 2
    noise: int = 3
    clustering: int = 4
    semantic: int = 5


@dataclass
class OutputConfig:
    dir: str = ""


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    semantic: SemanticConfig = field(default_factory=SemanticConfig)
    fusion: FusionSettings = field(default_factory=FusionSettings)
    intent: IntentConfig = field(default_factory=IntentConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


def _coerce(value, target_type, path):
    if target_type is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected integer, got {value!r}")
        return value
    if target_type is bool and not isinstance(value, bool):
        raise ConfigError(f"{path}: expected boolean, got {value!r}")
    if target_type is str and not isinstance(value, str):
        raise ConfigError(f"{path}: expected string, got {value!r}")
    if target_type is list or str(target_type).startswith("list"):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected list, got {value!r}")
        return list(value)
    return value


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a nested dict, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a table/mapping, got {type(raw).__name__}")
    cfg = ExperimentConfig()
    sections = {f.name: f for f in dataclasses.fields(cfg)}
    for section_name, section_val in raw.items():
        if section_name not in sections:
            raise ConfigError(f"unknown config section {section_name!r} "
                              f"(valid: {', '.join(sorted(sections))})")
        if not isinstance(section_val, dict):
            raise ConfigError(f"{section_name}: expected a table of keys, got {section_val!r}")
        section_obj = getattr(cfg, section_name)
        known = {f.name: f for f in dataclasses.fields(section_obj)}
        for key, value in section_val.items():
            if key not in known:
                raise ConfigError(f"unknown config key {section_name}.{key!r} "
                                  f"(valid: {', '.join(sorted(known))})")
            ftype = known[key].type
            base = {"int": int, "float": float, "bool": bool, "str": str}.get(ftype, ftype)
            if isinstance(base, str):
                base = list
            setattr(section_obj, key, _coerce(value, base, f"{section_name}.{key}"))
    validate_config(cfg)
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def validate_config(cfg: ExperimentConfig) -> None:
    f, m = cfg.fusion, cfg.model
    if f.strategy not in FUSION_STRATEGIES:
        raise ConfigError(f"fusion.strategy must be one of {FUSION_STRATEGIES}, got {f.strategy!r}")
    if not (0.0 <= f.weighted_alpha <= 1.0):
        raise ConfigError(f"fusion.weighted_alpha must be in [0, 1], got {f.weighted_alpha}")
    if f.ca_heads < 1 or m.d % f.ca_heads != 0:
        raise ConfigError(f"fusion.ca_heads must divide model.d ({m.d}), got {f.ca_heads}")
    if m.d < 1 or m.layers < 1 or m.heads < 1 or m.d % m.heads != 0:
        raise ConfigError(f"model.d ({m.d}) must be positive and divisible by model.heads ({m.heads})")
    if not (0.0 <= m.dropout < 1.0):
        raise ConfigError(f"model.dropout must be in [0, 1), got {m.dropout}")
    if m.adapter_layers not in (1, 2):
        raise ConfigError(f"model.adapter_layers must be 1 or 2, got {m.adapter_layers}")
    if m.adapter_activation not in ("gelu", "tanh"):
        raise ConfigError(f"model.adapter_activation must be 'gelu' or 'tanh', got {m.adapter_activation!r}")
    if m.dtype not in ("float32", "float64"):
        raise ConfigError(f"model.dtype must be 'float32' or 'float64', got {m.dtype!r}")
    if cfg.semantic.d_prime < 1:
        raise ConfigError(f"semantic.d_prime must be >= 1, got {cfg.semantic.d_prime}")
    i = cfg.intent
    if i.k < 2:
        raise ConfigError(f"intent.k must be >= 2, got {i.k}")
    if i.min_prefix < 1:
        raise ConfigError(f"intent.min_prefix must be >= 1, got {i.min_prefix}")
    if i.clustering_interval < 1:
        raise ConfigError(f"intent.clustering_interval must be >= 1, got {i.clustering_interval}")
    d = cfg.diffusion
    if d.steps < 1:
        raise ConfigError(f"diffusion.steps must be >= 1, got {d.steps}")
    if not (0.0 < d.beta_start <= d.beta_end < 1.0):
        raise ConfigError("diffusion betas must satisfy 0 < beta_start <= beta_end < 1, "
                          f"got ({d.beta_start}, {d.beta_end})")
    lo = cfg.loss
    if lo.lambda_rec <= 0:
        raise ConfigError(f"loss.lambda_rec must be > 0, got {lo.lambda_rec}")
    for name in ("lambda_diff", "lambda_cl", "lambda_align"):
        if getattr(lo, name) < 0:
            raise ConfigError(f"loss.{name} must be >= 0, got {getattr(lo, name)}")
    if lo.temperature <= 0:
        raise ConfigError(f"loss.temperature must be > 0, got {lo.temperature}")
    t = cfg.train
    if t.lr <= 0 or t.batch_size < 1 or t.epochs < 1 or t.patience < 1:
        raise ConfigError("train.lr/batch_size/epochs/patience must all be positive")
    e = cfg.eval
    if not e.ks or any(k < 1 for k in e.ks):
        raise ConfigError(f"eval.ks must be a non-empty list of k >= 1, got {e.ks}")
    if not (0.0 < e.tail_fraction < 1.0):
        raise ConfigError(f"eval.tail_fraction must be in (0, 1), got {e.tail_fraction}")
    if e.cold_threshold < 1:
        raise ConfigError(f"eval.cold_threshold must be >= 1, got {e.cold_threshold}")


def _parse_override_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply `section.key=value` overrides to a raw config dict."""
    out = copy.deepcopy(raw)
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not of the form key.path=value")
        dotted, text = ov.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2 or not all(parts):
            raise ConfigError(f"override key {dotted!r} must be section.key")
        section, key = parts
        out.setdefault(section, {})
        if not isinstance(out[section], dict):
            raise ConfigError(f"override {dotted!r}: section {section!r} is not a table")
        out[section][key] = _parse_override_value(text.strip())
    return out


def load_config_dict(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".toml":
        if sys.version_info >= (3, 11):
            import tomllib as toml_mod
        else:
            import tomli as toml_mod
        with open(path, "rb") as fh:
            return toml_mod.load(fh)
    if suffix in (".yaml", ".yml"):
        import yaml
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh)
        return loaded if loaded is not None else {}
    if suffix == ".json":
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    raise ConfigError(f"unsupported config format {suffix!r} (use .toml, .yaml, or .json)")


def load_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    raw = load_config_dict(path)
    if overrides:
        raw = apply_overrides(raw, overrides)
    return config_from_dict(raw)


def write_config_snapshot(cfg: ExperimentConfig, path: str | Path) -> None:
    """Write the fully resolved config as sorted JSON for reproducibility."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
