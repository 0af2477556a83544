"""Training configuration and its strict file loader (YAML or JSON)."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import AugmentationSpec
from .encoder import PRESETS
from .loss import LossConfig


class ConfigError(ValueError):
    pass


DEFAULT_HEAD_KIND = {"anatomy": "mlp", "tool": "skip"}


@dataclass(frozen=True)
class TrainConfig:
    dataset_root: str = "data"
    output_dir: str = "runs/default"
    head: str = "tool"
    head_kind: str | None = None       # defaults: anatomy -> mlp, tool -> skip
    variant: str = "tiny"
    embed_dim: int | None = None       # defaults to the variant's decoder width
    lr_base: float = 5e-6
    lr_max: float = 5e-5
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 100
    max_steps: int | None = None
    scheduler: str = "cyclic"
    cycle_length_steps: int = 2000
    loss: LossConfig = field(default_factory=LossConfig)
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    seed: int = 0
    val_split: str = "val"

    def __post_init__(self):
        if self.head not in DEFAULT_HEAD_KIND:
            raise ConfigError(f"head must be 'anatomy' or 'tool', got {self.head!r}")
        if self.head_kind not in (None, "mlp", "skip"):
            raise ConfigError(f"head_kind must be mlp or skip, got {self.head_kind!r}")
        if self.variant not in PRESETS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.lr_base <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigError("lr_base, batch_size and epochs must be positive")
        if self.scheduler not in ("cyclic", "constant"):
            raise ConfigError(f"scheduler must be cyclic or constant, got {self.scheduler!r}")
        if self.scheduler == "cyclic":
            if self.lr_max < self.lr_base:
                raise ConfigError("lr_max must be >= lr_base for the cyclic scheduler")
            if self.cycle_length_steps < 2:
                raise ConfigError("cycle_length_steps must be >= 2")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ConfigError("max_steps must be positive")

    @property
    def resolved_head_kind(self) -> str:
        return self.head_kind or DEFAULT_HEAD_KIND[self.head]

    @property
    def resolved_embed_dim(self) -> int:
        return self.embed_dim or PRESETS[self.variant].decoder_embed_dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_NESTED = {"loss": LossConfig, "augmentation": AugmentationSpec}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join((where + '.' if where else '') + k for k in unknown)}")
    kwargs = {}
    for k, v in data.items():
        if cls is TrainConfig and k in _NESTED:
            v = _build(_NESTED[k], v, k)
        elif k == "rotation_degrees":
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def config_from_dict(data: dict) -> TrainConfig:
    return _build(TrainConfig, data, "")


def load_config(path) -> TrainConfig:
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return config_from_dict(data or {})


def apply_overrides(config: TrainConfig, overrides: dict[str, Any]) -> TrainConfig:
    """Apply dotted-key overrides such as ``{"loss.alpha": 0.5}``."""
    data = config.to_dict()
    for key, value in overrides.items():
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key}")
        node[parts[-1]] = value
    return config_from_dict(data)
