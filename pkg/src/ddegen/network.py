"""Residual softplus MLPs for the scalar energy and the vector generator."""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .diffengine import kernels
from .diffengine.layout import MlpConfig, ParamLayout, layout_for, param_count
from .errors import ConfigError, ParseError
from .rng import stream

__all__ = [
    "MlpConfig", "MlpParams", "init_mlp", "identity_mlp", "dde_forward", "dde_score",
    "generator_forward", "param_count", "count_evaluations", "save_checkpoint",
    "load_checkpoint", "encode_floats", "decode_floats",
]


@dataclass
class MlpParams:
    config: MlpConfig
    flat: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.layout.size,):
            raise ConfigError(f"parameter vector of length {self.flat.size} does not match "
                              f"layout size {self.layout.size}")

    @property
    def layout(self) -> ParamLayout:
        return layout_for(self.config)

    def view(self, name: str) -> np.ndarray:
        return self.layout.view(self.flat, name)

    def copy(self) -> "MlpParams":
        return MlpParams(self.config, self.flat.copy(), self.seed)


def init_mlp(config: MlpConfig, seed: int) -> MlpParams:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    rng = stream(seed, "init_mlp")
    lay = layout_for(config)
    flat = np.zeros(lay.size)
    for slot in lay.slots:
        if len(slot.shape) == 2:
            bound = 1.0 / np.sqrt(slot.shape[1])
            flat[slot.offset:slot.offset + slot.size] = rng.uniform(-bound, bound, slot.size)
    return MlpParams(config, flat, seed)


def identity_mlp(config: MlpConfig) -> MlpParams:
    """Parameters for which the network computes ``y = x`` (needs in_dim == out_dim).

    Residual nets get identity adapters (channels >= in_dim) and zero blocks; a
    one-layer plain net gets an identity matrix.
    """
    if config.in_dim != config.out_dim:
        raise ConfigError("identity network needs in_dim == out_dim")
    p = MlpParams(config, np.zeros(layout_for(config).size))
    n = config.in_dim
    if config.residual:
        if config.channels < n:
            raise ConfigError("identity residual network needs channels >= in_dim")
        p.view("in.W")[:n, :n] = np.eye(n)
        p.view("out.W")[:n, :n] = np.eye(n)
    elif config.layers == 1:
        p.view("layer0.W")[:] = np.eye(n)
    else:
        raise ConfigError("identity plain network only defined for a single layer")
    return p


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.config.in_dim:
        raise ConfigError(f"expected input dimension {params.config.in_dim}, got shape {x.shape}")
    return x, single


def dde_forward(params: MlpParams, x):
    """Scalar energy s(x; theta). Accepts one point (n,) or a batch (B, n)."""
    if params.config.out_dim != 1:
        raise ConfigError("dde_forward needs a scalar-output network")
    xb, single = _as_batch(params, x)
    s = kernels.forward(params.config, params.flat, xb)[:, 0]
    return float(s[0]) if single else s


def dde_score(params: MlpParams, x):
    """Input gradient of the energy, same batching rules as :func:`dde_forward`."""
    xb, single = _as_batch(params, x)
    _, g = kernels.value_and_input_grad(params.config, params.flat, xb)
    return g[0] if single else g


def generator_forward(params: MlpParams, z):
    zb, single = _as_batch(params, z)
    y = kernels.forward(params.config, params.flat, zb)
    return y[0] if single else y


@contextmanager
def count_evaluations():
    """Yields a callable returning per-sample network evaluations made inside the block."""
    start = kernels.eval_counter.count
    yield lambda: kernels.eval_counter.count - start


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_FORMAT = "ddegen-checkpoint/1"


def encode_floats(a) -> list[str]:
    # 17 significant digits round-trip any float64 exactly
    return [format(float(v), ".17g") for v in np.ravel(a)]


def decode_floats(items) -> np.ndarray:
    try:
        return np.array([float(s) for s in items], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad float in checkpoint: {exc}") from None


@dataclass
class Checkpoint:
    kind: str
    params: MlpParams
    sigma_eta: float | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, kind: str, params: MlpParams, sigma_eta=None, meta=None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "config": params.config.to_dict(),
        "seed": params.seed,
        "params": encode_floats(params.flat),
        "sigma_eta": None if sigma_eta is None else format(float(sigma_eta), ".17g"),
        "meta": meta or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"checkpoint {path} is not valid JSON: {exc.msg}", row=exc.lineno) from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
    config = MlpConfig.from_dict(doc["config"])
    params = MlpParams(config, decode_floats(doc["params"]), doc.get("seed"))
    sigma = doc.get("sigma_eta")
    return Checkpoint(doc["kind"], params, None if sigma is None else float(sigma), doc.get("meta", {}))
