"""Training / model configuration."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def canonical_json(obj):
    """Sorted keys, two-space indent, shortest round-trip floats, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


@dataclass
class TrainConfig:
    # defaults are the full-size settings; desk runs override them
    grid_k: int = 16
    top_l: int = 15
    visual_dim: int = 2048
    word_dim: int = 300
    block_dim: int = 200
    joint_dim: int = 1024
    margin: float = 0.2
    lambda_ti: float = 9.0
    lambda_it: float = 4.0
    batch_size: int = 128
    lr: float = 5e-4
    epochs: int = 30
    seed: int = 0
    direction: str = "t-i"
    precision: str = "single"
    max_regions: int = 36
    max_tokens: int = 64
    grad_clip: float = 2.0
    early_stop: bool = False  # stop once an epoch's loss is exactly zero
    position: str = "attention"
    sim_norm: str = "attended"
    dataset: str | None = None
    split: str = "train"
    checkpoint: str | None = None
    synthetic: dict | None = field(default=None)

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("grid_k", "top_l", "visual_dim", "word_dim", "joint_dim", "max_regions", "max_tokens"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        for name in ("block_dim", "epochs"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ConfigError(f"{name} must be a nonnegative integer, got {value!r}")
        if self.top_l > self.grid_k ** 2:
            raise ConfigError(f"top_l={self.top_l} exceeds the {self.grid_k ** 2} blocks")
        if not self.margin > 0:
            raise ConfigError("margin must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 so every batch has a negative")
        if not (self.lambda_ti > 0 and self.lambda_it > 0):
            raise ConfigError("attention temperatures must be positive")
        if self.lr < 0 or self.grad_clip <= 0:
            raise ConfigError("lr must be >= 0 and grad_clip > 0")
        if self.direction not in ("t-i", "i-t"):
            raise ConfigError(f"direction must be 't-i' or 'i-t', got {self.direction!r}")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision must be 'single' or 'double', got {self.precision!r}")
        if self.position not in ("attention", "baseline"):
            raise ConfigError(f"position must be 'attention' or 'baseline', got {self.position!r}")
        if self.sim_norm not in ("attended", "query"):
            raise ConfigError(f"sim_norm must be 'attended' or 'query', got {self.sim_norm!r}")

    @property
    def lam(self):
        return self.lambda_ti if self.direction == "t-i" else self.lambda_it

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def hash(self):
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()[:16]

    def structure(self):
        """Fields that fix parameter shapes."""
        return {k: getattr(self, k) for k in ("grid_k", "top_l", "visual_dim", "word_dim", "block_dim", "joint_dim")}


def load_config(path):
    """Read a JSON config; relative dataset/checkpoint paths resolve against its folder.

    ``PFAN_SEED`` in the environment overrides the seed.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    for key in ("dataset", "checkpoint"):
        if data.get(key) and not os.path.isabs(data[key]):
            data[key] = str((path.parent / data[key]).resolve())
    if "PFAN_SEED" in os.environ:
        try:
            data["seed"] = int(os.environ["PFAN_SEED"])
        except ValueError:
            raise ConfigError("PFAN_SEED must be an integer") from None
    return TrainConfig.from_dict(data)
