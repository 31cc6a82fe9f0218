"""Denoising density estimators.

A DDE is a scalar network ``s(x)`` trained so that its input gradient at a
noisy point ``x + eta`` predicts ``-eta / sigma**2``. At the optimum the
gradient is the score of the data density convolved with N(0, sigma^2 I),
so ``s`` itself is that smoothed log-density up to an additive constant.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffengine import kernels
from .errors import ConfigError, ContractError, NumericError
from .network import (MlpConfig, MlpParams, decode_floats, dde_forward, dde_score, encode_floats,
                      init_mlp, load_checkpoint, save_checkpoint)
from .optim import Adam
from .rng import stream

log = logging.getLogger(__name__)

LOSS_CHUNK = 8192


@dataclass
class DdeModel:
    params: MlpParams
    sigma_eta: float
    # moments of the training inputs; default importance-sampling proposal
    data_mean: np.ndarray | None = None
    data_cov: np.ndarray | None = None

    def __post_init__(self):
        if not self.sigma_eta > 0:
            raise ConfigError(f"sigma_eta must be positive, got {self.sigma_eta}")
        if self.params.config.out_dim != 1:
            raise ConfigError("a DDE needs a scalar-output network")

    @property
    def config(self) -> MlpConfig:
        return self.params.config

    @property
    def dim(self) -> int:
        return self.params.config.in_dim

    def energy(self, x):
        return dde_forward(self.params, x)

    def score(self, x):
        return dde_score(self.params, x)

    def energy_and_score(self, x):
        """Energy and input gradient of a batch in one pass."""
        return kernels.value_and_input_grad(self.config, self.params.flat, np.asarray(x, dtype=np.float64))

    def copy(self) -> "DdeModel":
        return DdeModel(self.params.copy(), self.sigma_eta,
                        None if self.data_mean is None else self.data_mean.copy(),
                        None if self.data_cov is None else self.data_cov.copy())


@dataclass
class AnalyticEnergy:
    """A closed-form stand-in for a trained DDE.

    Quacks like :class:`DdeModel` for the generator and sampler code: it has
    ``sigma_eta``, ``dim``, ``energy``, ``score`` and ``energy_and_score``.
    Used as an exact oracle in place of the data DDE.
    """
    energy_fn: object
    score_fn: object
    sigma_eta: float
    dim: int
    data_mean: np.ndarray | None = None
    data_cov: np.ndarray | None = None

    def energy(self, x):
        return np.asarray(self.energy_fn(np.atleast_2d(np.asarray(x, dtype=np.float64))))

    def score(self, x):
        return np.asarray(self.score_fn(np.atleast_2d(np.asarray(x, dtype=np.float64))))

    def energy_and_score(self, x):
        return self.energy(x), self.score(x)


def gaussian_energy(mean, cov, sigma_eta: float) -> AnalyticEnergy:
    """Exact log-density of N(mean, cov) convolved with N(0, sigma_eta^2 I)."""
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    d = mean.size
    cov = np.asarray(cov, dtype=np.float64)
    cov = cov * np.eye(d) if cov.ndim == 0 else np.diag(cov) if cov.ndim == 1 else cov
    full = cov + sigma_eta ** 2 * np.eye(d)
    prec = np.linalg.inv(full)
    _, logdet = np.linalg.slogdet(full)
    const = -0.5 * (logdet + d * math.log(2 * math.pi))

    def energy(x):
        r = x - mean
        return const - 0.5 * np.einsum("bi,ij,bj->b", r, prec, r)

    return AnalyticEnergy(energy, lambda x: -(x - mean) @ prec, sigma_eta, d, mean, cov)


def mixture_energy(spec, sigma_eta: float) -> AnalyticEnergy:
    """Exact log-density of an isotropic mixture convolved with the noise."""
    from scipy.special import softmax

    from .datasets import mixture_log_density

    var = spec.std ** 2 + sigma_eta ** 2

    def score(x):
        diff = x[:, None, :] - spec.means[None, :, :]
        w = softmax(-0.5 * (diff ** 2).sum(-1) / var, axis=1)
        return -(w[:, :, None] * diff).sum(1) / var

    mean = spec.means.mean(axis=0)
    cov = np.cov(spec.means, rowvar=False, bias=True) + spec.std ** 2 * np.eye(spec.dim)
    return AnalyticEnergy(lambda x: mixture_log_density(spec, x, sigma_eta), score, sigma_eta, spec.dim,
                          mean, np.atleast_2d(cov))


@dataclass
class LrDecay:
    factor: float = 1.0
    every_steps: int = 0

    def at(self, lr: float, step: int) -> float:
        if self.every_steps <= 0 or self.factor == 1.0:
            return lr
        return lr / self.factor ** (step // self.every_steps)


@dataclass
class DdeTrainConfig:
    batch_size: int = 2048
    steps: int = 10000
    lr: float = 2.5e-4
    lr_decay: LrDecay = field(default_factory=LrDecay)
    sigma_start: float = 0.1
    sigma_end: float = 0.1
    sigma_decay_factor: float = 1.1
    sigma_decay_every: int = 1000
    sigma_schedule: str = "geometric"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.lr_decay, dict):
            self.lr_decay = LrDecay(**self.lr_decay)
        if not (self.sigma_start > 0 and self.sigma_end > 0):
            raise ConfigError(f"noise levels must be positive, got {self.sigma_start} -> {self.sigma_end}")
        if self.sigma_start < self.sigma_end:
            raise ConfigError("sigma_start must be >= sigma_end")
        if not self.lr > 0 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError("lr must be > 0, batch_size >= 1 and steps >= 0")
        if self.sigma_schedule not in ("geometric", "linear"):
            raise ConfigError(f"unknown sigma schedule {self.sigma_schedule!r}")
        if self.sigma_decay_factor < 1.0:
            raise ConfigError("sigma_decay_factor must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DdeTrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown DDE training keys: {sorted(unknown)}")
        return cls(**d)


class NoiseSchedule:
    """Noise level per step: starts at ``sigma_start``, never increases, clamps at ``sigma_end``.

    ``geometric`` divides by ``sigma_decay_factor`` every ``sigma_decay_every``
    steps. ``linear`` takes equal decrements per interval so that the last
    interval of the run sits at ``sigma_end``.
    """

    def __init__(self, cfg: DdeTrainConfig):
        self.start = cfg.sigma_start
        self.end = cfg.sigma_end
        self.factor = cfg.sigma_decay_factor
        self.every = max(int(cfg.sigma_decay_every), 1)
        self.kind = cfg.sigma_schedule
        self.intervals = max(math.ceil(cfg.steps / self.every) - 1, 1)

    def sigma_at(self, step: int) -> float:
        k = step // self.every
        if self.kind == "geometric":
            sigma = self.start / self.factor ** k
        else:
            sigma = self.start - (self.start - self.end) * k / self.intervals
        return max(sigma, self.end)

    def values(self, steps: int) -> np.ndarray:
        return np.array([self.sigma_at(k) for k in range(steps)])


def _noise_target(batch, sigma, rng, eta):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ContractError("DDE loss needs a non-empty (B, n) batch")
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    if eta is None:
        eta = sigma * rng.standard_normal(batch.shape)
    else:
        eta = np.asarray(eta, dtype=np.float64)
        if eta.shape != batch.shape:
            raise ConfigError("eta must match the batch shape")
    return batch + eta, -eta / sigma ** 2


def dde_loss_and_grad(model: DdeModel, batch, sigma: float, rng=None, eta=None):
    """Monte-Carlo DDE loss (one noise draw per point) and its parameter gradient."""
    x, target = _noise_target(batch, sigma, rng, eta)
    return kernels.dde_loss_and_grad(model.config, model.params.flat, x, target)


def dde_loss(model: DdeModel, batch, sigma: float, rng=None, eta=None) -> float:
    """Mean of ||grad s(x + eta) + eta / sigma^2||^2 over the batch.

    ``eta`` overrides the noise draw (tests use it to pin the noise).
    """
    x, target = _noise_target(batch, sigma, rng, eta)

    def part(lo, hi):
        loss, _ = kernels.dde_loss_and_grad(model.config, model.params.flat, x[lo:hi], target[lo:hi])
        return loss * (hi - lo)

    return sum(kernels.map_chunks(part, x.shape[0], LOSS_CHUNK)) / x.shape[0]


def dde_train_step(model: DdeModel, batch, sigma: float, opt: Adam, rng, lr: float) -> float:
    """One Adam update of ``model`` in place; returns the pre-update loss."""
    loss, grad = dde_loss_and_grad(model, batch, sigma, rng)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite DDE gradient", node="dde_train_step")
    opt.step(model.params.flat, grad, lr)
    return loss


@dataclass
class DdeTrainState:
    model: DdeModel
    opt: Adam
    step: int = 0
    trace: list = field(default_factory=list)  # rows of (step, sigma, loss, lr)


def _points(data) -> np.ndarray:
    pts = getattr(data, "points", data)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ContractError("training data must be a non-empty (N, n) array")
    return pts


def new_train_state(data, net: MlpConfig, cfg: DdeTrainConfig) -> DdeTrainState:
    pts = _points(data)
    if pts.shape[1] != net.in_dim:
        raise ConfigError(f"data dimension {pts.shape[1]} does not match network input {net.in_dim}")
    params = init_mlp(net, cfg.seed)
    cov = np.atleast_2d(np.cov(pts, rowvar=False)) if pts.shape[0] > 1 else np.eye(pts.shape[1])
    model = DdeModel(params, cfg.sigma_start, pts.mean(axis=0), cov)
    return DdeTrainState(model, Adam(params.flat.size))


def train_dde(data, net: MlpConfig, cfg: DdeTrainConfig, state: DdeTrainState | None = None,
              stop_at: int | None = None, callback=None):
    """Train (or resume) a DDE on ``data``; returns ``(model, state)``.

    Mini-batches are drawn with replacement. Step ``k`` uses the random
    stream ``(cfg.seed, "dde_step", k)``, so stopping at ``stop_at`` and
    resuming from the returned state reproduces an uninterrupted run.
    """
    pts = _points(data)
    if state is None:
        state = new_train_state(pts, net, cfg)
    elif pts.shape[1] != state.model.dim:
        raise ConfigError("data dimension does not match the resumed model")
    schedule = NoiseSchedule(cfg)
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    N = pts.shape[0]
    while state.step < end:
        k = state.step
        rng = stream(cfg.seed, "dde_step", k)
        batch = pts[rng.integers(0, N, cfg.batch_size)]
        sigma = schedule.sigma_at(k)
        lr = cfg.lr_decay.at(cfg.lr, k)
        loss = dde_train_step(state.model, batch, sigma, state.opt, rng, lr)
        state.trace.append((k, sigma, loss, lr))
        state.step += 1
        if callback is not None:
            callback(state)
    if cfg.steps:
        state.model.sigma_eta = schedule.sigma_at(max(state.step - 1, 0))
    return state.model, state


def log_density_unnormalized(model: DdeModel, x):
    """Smoothed log-density plus an unknown constant; only differences are meaningful."""
    return model.energy(x)


def denoise(model: DdeModel, x):
    """Tweedie denoiser x + sigma^2 * score(x)."""
    x = np.asarray(x, dtype=np.float64)
    return x + model.sigma_eta ** 2 * model.score(x)


def optimal_gaussian_loss(dim: int, data_var: float, sigma: float) -> float:
    """Minimum DDE loss for isotropic Gaussian data: n/sigma^2 - n/(data_var + sigma^2)."""
    return dim / sigma ** 2 - dim / (data_var + sigma ** 2)


# -- persistence -------------------------------------------------------------

def dde_meta(model: DdeModel, state: DdeTrainState | None = None, extra: dict | None = None) -> dict:
    meta = dict(extra or {})
    if model.data_mean is not None:
        meta["data_mean"] = encode_floats(model.data_mean)
        meta["data_cov"] = encode_floats(model.data_cov)
    if state is not None:
        meta["step"] = state.step
        meta["optimizer"] = state.opt.to_json()
    return meta


def save_dde(path, model: DdeModel, state: DdeTrainState | None = None, extra: dict | None = None) -> None:
    """Write a DDE checkpoint; with ``state`` it also carries what resume needs."""
    save_checkpoint(path, "dde", model.params, model.sigma_eta, dde_meta(model, state, extra))


def dde_from_checkpoint(ckpt) -> tuple[DdeModel, DdeTrainState | None]:
    if ckpt.kind != "dde":
        raise ConfigError(f"expected a DDE checkpoint, got kind {ckpt.kind!r}")
    meta = ckpt.meta
    mean = cov = None
    if "data_mean" in meta:
        mean = decode_floats(meta["data_mean"])
        cov = decode_floats(meta["data_cov"]).reshape(mean.size, mean.size)
    model = DdeModel(ckpt.params, ckpt.sigma_eta, mean, cov)
    state = None
    if "optimizer" in meta:
        state = DdeTrainState(model, Adam.from_json(meta["optimizer"]), int(meta["step"]))
    return model, state


def load_dde(path) -> tuple[DdeModel, DdeTrainState | None]:
    return dde_from_checkpoint(load_checkpoint(path))
