"""Model hyperparameter records and their JSON form."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError


@dataclass(frozen=True)
class MoEConfig:
    n_experts: int
    top_k: int
    expert_ff_dim: int
    n_dense_prefix_layers: int = 2
    router_bias_step: float = 1e-3

    def validate(self):
        if self.n_experts < 1:
            raise ConfigError("moe.n_experts must be >= 1")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"moe.top_k={self.top_k} must lie in [1, n_experts={self.n_experts}]")
        if self.expert_ff_dim < 1:
            raise ConfigError("moe.expert_ff_dim must be >= 1")
        if self.n_dense_prefix_layers < 0:
            raise ConfigError("moe.n_dense_prefix_layers must be >= 0")
        if not self.router_bias_step > 0:
            raise ConfigError("moe.router_bias_step must be positive")


def evenly_spaced(n_layers: int, count: int) -> tuple[int, ...]:
    """Default attention positions: ``count`` layers spread across the stack."""
    if count <= 0:
        return ()
    if count > n_layers:
        raise ConfigError(f"cannot place {count} attention layers in {n_layers}")
    return tuple(sorted({(j + 1) * n_layers // (count + 1) for j in range(count)}))


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    ff_dim: int
    n_heads: int
    n_kv_groups: int
    head_size: int
    attn_layer_indices: tuple[int, ...]
    conv_kernel: int
    vocab_size: int
    rope_base: float = 10000.0
    moe: Optional[MoEConfig] = None
    context_limit: int = 8192
    tie_embeddings: bool = False
    norm_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "attn_layer_indices", tuple(int(i) for i in self.attn_layer_indices))
        self.validate()

    def validate(self):
        for name in ("n_layers", "d_model", "ff_dim", "n_heads", "n_kv_groups", "head_size",
                     "vocab_size", "context_limit"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_heads % self.n_kv_groups:
            raise ConfigError(
                f"n_heads={self.n_heads} is not divisible by n_kv_groups={self.n_kv_groups}"
            )
        if self.head_size % 2:
            raise ConfigError(f"head_size={self.head_size} must be even for rotary embeddings")
        if self.conv_kernel < 1:
            raise ConfigError("conv_kernel must be >= 1")
        idx = self.attn_layer_indices
        if len(set(idx)) != len(idx) or any(not 0 <= i < self.n_layers for i in idx):
            raise ConfigError(f"attn_layer_indices {idx} must be distinct and within [0, {self.n_layers})")
        if not self.norm_eps > 0:
            raise ConfigError("norm_eps must be positive")
        if self.moe is not None:
            self.moe.validate()

    @property
    def attn_width(self) -> int:
        return self.n_heads * self.head_size

    @property
    def kv_width(self) -> int:
        return self.n_kv_groups * self.head_size

    def is_attention(self, layer: int) -> bool:
        return layer in self.attn_layer_indices

    def is_moe(self, layer: int) -> bool:
        return self.moe is not None and layer >= self.moe.n_dense_prefix_layers

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attn_layer_indices"] = list(self.attn_layer_indices)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        moe = d.get("moe")
        if moe is not None:
            try:
                d["moe"] = MoEConfig(**moe)
            except TypeError as exc:
                raise ConfigError(f"bad moe section: {exc}") from None
        attn = d.get("attn_layer_indices")
        if attn is None:
            d["attn_layer_indices"] = ()
        elif isinstance(attn, int):
            # a bare count places that many attention layers evenly
            d["attn_layer_indices"] = evenly_spaced(int(d.get("n_layers", 0)), attn)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data)


def toy_config(**overrides) -> ModelConfig:
    """Small hybrid used throughout the tests: 4 layers, width 64, one attention layer."""
    base = dict(
        n_layers=4, d_model=64, ff_dim=128, n_heads=4, n_kv_groups=2, head_size=16,
        attn_layer_indices=(2,), conv_kernel=3, vocab_size=256, context_limit=1024,
    )
    base.update(overrides)
    return ModelConfig(**base)
