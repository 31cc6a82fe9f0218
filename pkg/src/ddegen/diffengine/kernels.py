"""Backend selection for the MLP kernels.

The compiled extension is used when it imported cleanly and the network is
residual; plain MLPs and environments without a compiler use the numpy
implementation. ``DDEGEN_BACKEND=python`` forces the numpy path.

Every kernel call adds its batch size to :data:`eval_counter`, which is how
samplers report network evaluations per sample.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

import numpy as np

from ..errors import ConfigError, NumericError
from . import _mlp_py
from .layout import MlpConfig, layout_for

log = logging.getLogger(__name__)

try:
    from . import _mlp_ext
except ImportError:  # pragma: no cover - depends on build environment
    _mlp_ext = None

_forced = os.environ.get("DDEGEN_BACKEND", "").lower()
if _forced not in ("", "python", "native"):
    raise ConfigError(f"DDEGEN_BACKEND must be 'python' or 'native', got {_forced!r}")
if _forced == "native" and _mlp_ext is None:
    raise ImportError("DDEGEN_BACKEND=native but the compiled extension is unavailable")

_use_native = _mlp_ext is not None and _forced != "python"


class EvalCounter:
    """Counts per-sample network evaluations (a score evaluation counts as one)."""

    def __init__(self):
        self.count = 0

    def add(self, n):
        self.count += int(n)


eval_counter = EvalCounter()


def native_available() -> bool:
    return _mlp_ext is not None


def active_backend() -> str:
    return "native" if _use_native else "python"


def set_backend(name: str) -> None:
    global _use_native
    if name == "native":
        if _mlp_ext is None:
            raise ConfigError("compiled extension not available")
        _use_native = True
    elif name == "python":
        _use_native = False
    else:
        raise ConfigError(f"unknown backend {name!r}")


@contextmanager
def backend(name: str):
    prev = active_backend()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


_threads = 1


def set_threads(n: int) -> None:
    """Worker threads for independent evaluation chunks (training stays serial)."""
    global _threads
    if int(n) < 1:
        raise ConfigError(f"threads must be >= 1, got {n}")
    _threads = int(n)


def get_threads() -> int:
    return _threads


def map_chunks(fn, n: int, chunk: int) -> list:
    """``[fn(lo, hi) for each chunk]`` in order; chunks run on a pool when threads > 1."""
    spans = [(i, min(i + chunk, n)) for i in range(0, n, chunk)]
    if _threads == 1 or len(spans) == 1:
        return [fn(lo, hi) for lo, hi in spans]
    with ThreadPoolExecutor(max_workers=_threads) as pool:
        return list(pool.map(lambda span: fn(*span), spans))


def _native_for(cfg: MlpConfig) -> bool:
    return _use_native and cfg.residual


def _prep(cfg: MlpConfig, theta, x):
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.in_dim:
        raise ConfigError(f"input must have shape (B, {cfg.in_dim}), got {x.shape}")
    size = layout_for(cfg).size
    if theta.shape != (size,):
        raise ConfigError(f"expected {size} parameters, got shape {theta.shape}")
    return theta, x


def forward(cfg: MlpConfig, theta, x) -> np.ndarray:
    theta, x = _prep(cfg, theta, x)
    eval_counter.add(x.shape[0])
    if _native_for(cfg):
        return _mlp_ext.forward(cfg.channels, cfg.layers, theta, x, cfg.out_dim)
    return _mlp_py.forward(cfg, theta, x)


def value_and_input_grad(cfg: MlpConfig, theta, x):
    if cfg.out_dim != 1:
        raise ConfigError("input gradient needs a scalar-output network")
    theta, x = _prep(cfg, theta, x)
    eval_counter.add(x.shape[0])
    if _native_for(cfg):
        return _mlp_ext.value_and_input_grad(cfg.channels, cfg.layers, theta, x)
    return _mlp_py.value_and_input_grad(cfg, theta, x)


def dde_loss_and_grad(cfg: MlpConfig, theta, x, target):
    """Mean ||grad_x s(x) - target||^2 over the batch and its parameter gradient."""
    if cfg.out_dim != 1:
        raise ConfigError("DDE loss needs a scalar-output network")
    theta, x = _prep(cfg, theta, x)
    target = np.ascontiguousarray(target, dtype=np.float64)
    if target.shape != x.shape:
        raise ConfigError(f"target shape {target.shape} does not match input {x.shape}")
    eval_counter.add(x.shape[0])
    if _native_for(cfg):
        loss, grad = _mlp_ext.dde_loss_and_grad(cfg.channels, cfg.layers, theta, x, target)
    else:
        loss, grad = _mlp_py.dde_loss_and_grad(cfg, theta, x, target)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NumericError("non-finite DDE loss or gradient", node="dde_loss")
    return loss, grad


def vjp(cfg: MlpConfig, theta, x, ybar):
    theta, x = _prep(cfg, theta, x)
    ybar = np.ascontiguousarray(ybar, dtype=np.float64)
    if ybar.shape != (x.shape[0], cfg.out_dim):
        raise ConfigError(f"cotangent must have shape {(x.shape[0], cfg.out_dim)}, got {ybar.shape}")
    eval_counter.add(x.shape[0])
    return _mlp_py.vjp(cfg, theta, x, ybar)
