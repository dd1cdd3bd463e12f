"""Model/training hyperparameters and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import Dict, Mapping

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Every hyperparameter of a run.

    Defaults are the reference hyperparameters except for the embedding
    width: ``d=64`` keeps runs desk-sized (the ``large`` preset restores 1024).
    ``d_ff=0`` means "4 * d".
    """

    d: int = 64
    num_layers: int = 2
    num_heads: int = 8
    d_ff: int = 0
    dropout: float = 0.1
    max_seq_len: int = 150
    batch_size: int = 16
    alpha0: float = 2e-5
    warmup_fraction: float = 0.1
    lr_decay: str = "constant"
    max_epochs: int = 50
    patience: int = 3
    num_classes: int = 37
    weight_decay: float = 0.01
    threshold: float = 0.5
    seed: int = 0
    freeze_body: bool = False
    neg_ratio: float = 0.0

    def __post_init__(self):
        self.validate()

    @property
    def ffn_width(self) -> int:
        return self.d_ff if self.d_ff > 0 else 4 * self.d

    def validate(self) -> None:
        positive = ("d", "num_layers", "num_heads", "max_seq_len", "batch_size", "max_epochs",
                    "patience", "num_classes")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_ff < 0:
            raise ConfigError(f"d_ff must be >= 0 (0 means 4*d), got {self.d_ff}")
        if self.d % self.num_heads:
            raise ConfigError(f"d={self.d} must be divisible by num_heads={self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 < self.warmup_fraction <= 1.0:
            raise ConfigError(f"warmup_fraction must lie in (0, 1], got {self.warmup_fraction}")
        if self.alpha0 <= 0:
            raise ConfigError(f"alpha0 must be positive, got {self.alpha0}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.lr_decay not in ("constant", "linear"):
            raise ConfigError(f"lr_decay must be 'constant' or 'linear', got {self.lr_decay!r}")
        if self.neg_ratio < 0:
            raise ConfigError(f"neg_ratio must be >= 0 (0 keeps every negative), got {self.neg_ratio}")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "ModelConfig":
        """Build a config from string values, rejecting unknown keys."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, types[key])
        return cls(**kwargs)


def _coerce(key: str, raw, type_name):
    if not isinstance(raw, str):
        return raw
    type_name = getattr(type_name, "__name__", type_name)
    try:
        if type_name == "bool":
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {type_name}") from None


PRESETS: Dict[str, ModelConfig] = {
    "desk": ModelConfig(),
    "large": ModelConfig(d=1024),
}


def format_config(values: Mapping[str, object]) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, float):
            value = repr(value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_key_values(text: str, source: str = "<config>") -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config(path: str, base: ModelConfig = ModelConfig()) -> ModelConfig:
    """Read a config file; keys present override ``base``."""
    with open(path, encoding="utf-8") as fh:
        values = parse_key_values(fh.read(), source=path)
    merged = {k: str(v) if not isinstance(v, str) else v for k, v in base.to_dict().items()}
    unknown = set(values) - set(merged)
    if unknown:
        raise ConfigError(f"{path}: unknown config key(s): {', '.join(sorted(unknown))}")
    merged.update(values)
    return ModelConfig.from_mapping(merged)


def save_config(config: ModelConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(config.to_dict()))
