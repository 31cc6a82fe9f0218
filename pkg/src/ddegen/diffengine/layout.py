"""Architecture description and flat parameter layout for residual MLPs.

Parameters always live in one contiguous float64 vector. The layout maps
names to ``(offset, shape)`` slices so that kernels and the optimizer can
share the same buffer without copies.

Residual nets (``residual=True``)::

    h = A x + a                                  # input adapter
    h = h + W2 softplus(W1 h + b1) + b2          # ``layers`` times
    y = B h + c                                  # output adapter

Plain nets (``residual=False``) are ``layers`` dense maps with softplus
between consecutive ones; ``layers=1`` is a single affine map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from ..errors import ConfigError


@dataclass(frozen=True)
class MlpConfig:
    in_dim: int
    out_dim: int
    layers: int = 25
    channels: int = 32
    residual: bool = True
    activation: str = "softplus"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"dimensions must be positive, got {self.in_dim}->{self.out_dim}")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.activation != "softplus":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MlpConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown MlpConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Slot:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class ParamLayout:
    """Ordered index map from parameter names to slices of the flat vector."""

    def __init__(self, config: MlpConfig):
        self.config = config
        self.slots: list[Slot] = []
        self._by_name: dict[str, Slot] = {}
        off = 0
        for name, shape in _shapes(config):
            slot = Slot(name, off, shape)
            self.slots.append(slot)
            self._by_name[name] = slot
            off += slot.size
        self.size = off

    def __contains__(self, name):
        return name in self._by_name

    def __getitem__(self, name) -> Slot:
        return self._by_name[name]

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        s = self._by_name[name]
        return flat[s.offset:s.offset + s.size].reshape(s.shape)

    def unpack(self, flat: np.ndarray) -> dict:
        if flat.shape != (self.size,):
            raise ConfigError(f"expected {self.size} parameters, got shape {flat.shape}")
        return {s.name: flat[s.offset:s.offset + s.size].reshape(s.shape) for s in self.slots}

    def weight_names(self) -> list[str]:
        return [s.name for s in self.slots if len(s.shape) == 2]

    def bias_names(self) -> list[str]:
        return [s.name for s in self.slots if len(s.shape) == 1]


def _shapes(cfg: MlpConfig):
    C = cfg.channels
    if cfg.residual:
        yield "in.W", (C, cfg.in_dim)
        yield "in.b", (C,)
        for i in range(cfg.layers):
            yield f"block{i}.W1", (C, C)
            yield f"block{i}.b1", (C,)
            yield f"block{i}.W2", (C, C)
            yield f"block{i}.b2", (C,)
        yield "out.W", (cfg.out_dim, C)
        yield "out.b", (cfg.out_dim,)
    else:
        dims = [cfg.in_dim] + [C] * (cfg.layers - 1) + [cfg.out_dim]
        for i in range(cfg.layers):
            yield f"layer{i}.W", (dims[i + 1], dims[i])
            yield f"layer{i}.b", (dims[i + 1],)


@lru_cache(maxsize=64)
def layout_for(config: MlpConfig) -> ParamLayout:
    return ParamLayout(config)


def param_count(config: MlpConfig) -> int:
    """Sum of fan_in * fan_out + fan_out over every affine map."""
    C = config.channels
    if config.residual:
        maps = [(config.in_dim, C)] + [(C, C)] * (2 * config.layers) + [(C, config.out_dim)]
    else:
        dims = [config.in_dim] + [C] * (config.layers - 1) + [config.out_dim]
        maps = list(zip(dims[:-1], dims[1:]))
    return sum(fi * fo + fo for fi, fo in maps)
