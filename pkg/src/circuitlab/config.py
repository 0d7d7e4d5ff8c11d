"""Model configuration shared by the model, graph and pipeline modules."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

NORMALIZATIONS = ("none", "rms-internal")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    d_mlp: int
    vocab_size: int
    max_positions: int
    normalization: str = "none"
    seed: int = 0
    nonlinearity: str = "gelu-tanh"

    def __post_init__(self) -> None:
        # n_layers == 0 is the embed -> unembed model used by several oracles
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        for name in ("n_heads", "d_model", "d_head", "d_mlp", "vocab_size", "max_positions"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.nonlinearity != "gelu-tanh":
            raise ConfigError("only the tanh-approximated GELU is supported")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        """Short stable digest identifying the architecture (seed included)."""
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]
