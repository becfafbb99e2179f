"""Hyperparameters for the whole pipeline."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

from hierflow.errors import ConfigError
from hierflow.hierarchy import PREDICTION_MODES
from hierflow.patch import PatchConfig

SEED_ENV = "HIERFLOW_SEED"


@dataclass(frozen=True)
class ModelConfig:
    """Defaults follow the reported settings: L=72, T=36, W=36, S=8, Q=8, A=8, D=2T."""

    L: int = 72
    T: int = 36
    W: int = 36
    S: int = 8
    Q: int = 8
    A: int = 8
    D: int | None = None
    K: int = 3
    k: int = 2
    z: float = 0.5
    lr: float = 0.001
    epochs: int = 100
    coord_epochs: int | None = None
    batch_size: int = 64
    dropout: float = 0.0
    seed: int = 0
    aggregator: str = "mean"
    mode: str = "tp"
    prediction_layer: str | None = None
    slots_per_day: int = 72
    val_days: int = 5
    test_days: int = 5
    clip_norm: float = 5.0
    gru_hidden: int = 72

    def __post_init__(self):
        if self.D is None:
            object.__setattr__(self, "D", 2 * self.T)
        self.validate()

    def validate(self) -> None:
        for name in ("L", "T", "W", "S", "Q", "A", "D", "K", "k", "batch_size", "slots_per_day", "gru_hidden"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.epochs < 0 or (self.coord_epochs is not None and self.coord_epochs < 0):
            raise ConfigError("epochs must be >= 0")
        if not 0.0 < self.z < 1.0:
            raise ConfigError(f"z must lie in (0, 1), got {self.z}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.dropout != 0.0:
            raise ConfigError("dropout is fixed at 0")
        if self.mode not in ("tp", "hp"):
            raise ConfigError(f"mode must be 'tp' or 'hp', got {self.mode!r}")
        if self.aggregator not in ("mean", "sum"):
            raise ConfigError(f"aggregator must be 'mean' or 'sum', got {self.aggregator!r}")
        if self.prediction_layer is not None and self.prediction_layer not in PREDICTION_MODES:
            raise ConfigError(f"prediction_layer must be one of {PREDICTION_MODES}")
        if self.val_days < 0 or self.test_days < 1:
            raise ConfigError("need val_days >= 0 and test_days >= 1")
        self.patch().validate(self.L)

    def patch(self) -> PatchConfig:
        return PatchConfig(W=self.W, S=self.S, D=self.D, Q=self.Q, A=self.A)

    @property
    def pred_layer(self) -> str:
        if self.prediction_layer is not None:
            return self.prediction_layer
        return "all" if self.mode == "hp" else "bottom"

    @property
    def phase2_epochs(self) -> int:
        return self.epochs if self.coord_epochs is None else self.coord_epochs

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**obj)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        text = json.dumps(self.to_json(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def default_seed(fallback: int = 0) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return fallback
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
