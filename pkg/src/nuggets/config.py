from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture and compression hyperparameters.

    ``score_layer`` is the number of frozen feature blocks feeding the scorer
    (1 <= score_layer < n_layers). ``ratio`` is the compression ratio r,
    ``tau`` the uncompressed recent window, ``threshold`` the streaming score
    cutoff and ``segment`` the chunk length used by segment-parallel training.
    ``feature_window`` bounds the causal context of the frozen feature stack
    so scores can be computed in a streaming setting.
    """

    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 68
    max_pos: int = 256
    score_layer: int = 2
    ratio: float = 4.0
    tau: int = 16
    threshold: float = 0.0
    segment: int = 32
    feature_window: int = 16

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_layers < 2:
            raise ConfigError(f"n_layers must be >= 2, got {self.n_layers}")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if not 1 <= self.score_layer < self.n_layers:
            raise ConfigError(f"score_layer must satisfy 1 <= {self.score_layer} < {self.n_layers}")
        if self.ratio < 1:
            raise ConfigError(f"ratio must be >= 1, got {self.ratio}")
        if self.tau < 0:
            raise ConfigError(f"tau must be >= 0, got {self.tau}")
        if self.segment < 1:
            raise ConfigError(f"segment must be >= 1, got {self.segment}")
        if self.feature_window < 1:
            raise ConfigError(f"feature_window must be >= 1, got {self.feature_window}")
        if self.vocab_size < 1 or self.max_pos < 1:
            raise ConfigError("vocab_size and max_pos must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            kw[k] = float(v) if k in ("ratio", "threshold") else int(v)
        return cls(**kw)
