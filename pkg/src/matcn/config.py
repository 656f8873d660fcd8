"""Run configuration: flat key=value files, overridable field by field."""

from __future__ import annotations

import hashlib
import json
import typing
from dataclasses import asdict, dataclass, fields

from .preprocess import BBox
from .siamese import SiameseConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    d: int = 64
    n_heads: int = 8
    n_blocks: int = 4
    kernel_size: int = 10
    dilation_base: int = 2
    lat_vocab: int = 64
    lon_vocab: int = 64
    n_intervals: int = 288
    emb_lat: int = 16
    emb_lon: int = 16
    emb_interval: int = 8
    emb_velocity: int = 8
    ca_reduction: int = 4
    velocity_scale: float = 10.0
    profile_dim: int = 12
    head_hidden1: int = 128
    head_hidden2: int = 32
    disable_mhsa: bool = False
    disable_aggregation: bool = False
    # optimization
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 50
    steps_per_epoch: int = 50
    patience: int = 5
    seed: int = 0
    threshold: float = 0.5
    same_ratio: float = 0.5
    # data split and evaluation
    test_fraction: float = 0.3
    val_fraction: float = 0.15
    n_val_pairs: int = 200
    n_test_pairs: int = 400
    # paths
    corpus: str = ""
    out_dir: str = "run"
    checkpoint: str = ""
    # preprocessing
    lat_min: float = 22.40
    lat_max: float = 22.80
    lon_min: float = 113.80
    lon_max: float = 114.30
    grid_side: float = 0.01
    tz_offset_hours: float = 0.0
    interval_seconds: int = 300

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("batch_size, max_epochs and steps_per_epoch must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if not 0.0 <= self.same_ratio <= 1.0:
            raise ConfigError("same_ratio must lie in [0, 1]")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")

    def model_config(self) -> SiameseConfig:
        names = {f.name for f in fields(SiameseConfig)}
        return SiameseConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def bbox(self) -> BBox:
        return BBox(self.lat_min, self.lat_max, self.lon_min, self.lon_max)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_types(cls) -> dict[str, type]:
        hints = typing.get_type_hints(cls)
        return {f.name: hints[f.name] for f in fields(cls)}

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        types = cls.field_types()
        unknown = set(values) - set(types)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**{k: parse_value(types[k], v, k) for k, v in values.items()})

    def with_overrides(self, overrides: dict) -> "RunConfig":
        merged = self.to_dict()
        merged.update(overrides)
        return RunConfig.from_dict(merged)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_value(kind: type, raw, key: str = "?"):
    if not isinstance(raw, str):
        if kind is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if kind is bool and not isinstance(raw, bool):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        if not isinstance(raw, kind):
            raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}")
        return raw
    text = raw.strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from None


def read_config_file(path, section: str = "run") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Keys before any ``[section]`` header belong to ``run``; only keys of the
    requested section are returned, so one file can also carry ``[synth]``.
    """
    values = {}
    current = "run"
    try:
        lines = open(path, encoding="utf-8").read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected key = value")
        if current == section:
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = read_config_file(path) if path else {}
    values.update(overrides or {})
    return RunConfig.from_dict(values)
