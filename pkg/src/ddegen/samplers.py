"""Direct generator sampling and annealed Langevin dynamics on DDE scores."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .dde import AnalyticEnergy, DdeModel
from .errors import ConfigError, ContractError, ModelKindError, NumericError, ParseError
from .generator import GeneratorModel
from .rng import stream

CHAIN_BLOCK = 256
DIVERGENCE_NORM = 1e6


@dataclass
class AldConfig:
    sigma_levels: list = field(default_factory=lambda: default_levels(0.1))
    steps_per_level: int = 100
    step_size_base: float = 2e-3
    seed: int = 0

    def __post_init__(self):
        levels = [float(s) for s in self.sigma_levels]
        if not levels:
            raise ConfigError("ALD needs at least one noise level")
        if any(s <= 0 for s in levels):
            raise ConfigError("ALD noise levels must be positive")
        if any(b >= a for a, b in zip(levels, levels[1:])):
            raise ConfigError("ALD noise levels must be strictly decreasing")
        if self.steps_per_level < 1 or self.step_size_base < 0:
            raise ConfigError("steps_per_level must be >= 1 and step_size_base >= 0")
        self.sigma_levels = levels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AldConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ALD keys: {sorted(unknown)}")
        return cls(**d)


def default_levels(sigma_eta: float, n: int = 10, top: float = 1.0) -> list:
    """Geometric ladder from ``top`` down to ``sigma_eta``."""
    if n == 1 or top <= sigma_eta:
        return [float(sigma_eta)]
    return np.geomspace(top, sigma_eta, n).tolist()


def sample_direct(gen: GeneratorModel, n: int, seed: int = 0) -> np.ndarray:
    """``n`` i.i.d. samples g(z), z ~ N(0, I): one network evaluation each."""
    if not isinstance(gen, GeneratorModel):
        raise ModelKindError(f"direct sampling needs a generator, got {type(gen).__name__}")
    if n < 1:
        raise ContractError(f"need n >= 1 samples, got {n}")
    z = stream(seed, "sample_direct").standard_normal((n, gen.latent_dim))
    return gen(z)


def _chain_noise(seed, tag, n, d):
    """Per-block generators: chain i's draws depend only on (seed, i)."""
    return [stream(seed, tag, b) for b in range((n + CHAIN_BLOCK - 1) // CHAIN_BLOCK)], d


def _draw(gens, n, d):
    out = np.concatenate([g.standard_normal((CHAIN_BLOCK, d)) for g in gens])
    return out[:n]


def sample_ald(dde, cfg: AldConfig, n: int, init_bounds=None):
    """Annealed Langevin chains; returns ``(samples, per_level_diagnostics)``.

    ``dde`` is one :class:`DdeModel` (or analytic energy) reused at every level, or a list with
    one model per level. Level ``i`` uses step ``alpha_i = base * sigma_i^2 /
    sigma_L^2`` and the update ``x += alpha/2 * score(x) + sqrt(alpha) * xi``.
    Chains start uniform over ``init_bounds`` (default: recorded data mean
    +- 3 std of the first model).
    """
    if n < 1:
        raise ContractError(f"need n >= 1 samples, got {n}")
    levels = cfg.sigma_levels
    models = list(dde) if isinstance(dde, (list, tuple)) else [dde] * len(levels)
    for m in models:
        if not isinstance(m, (DdeModel, AnalyticEnergy)):
            raise ModelKindError(f"Langevin sampling needs DDE models, got {type(m).__name__}")
    if len(models) != len(levels):
        raise ConfigError(f"{len(models)} models for {len(levels)} noise levels")
    d = models[0].dim
    if init_bounds is None:
        m0 = models[0]
        if m0.data_mean is None:
            raise ConfigError("no init_bounds given and the DDE has no recorded data moments")
        sd = np.sqrt(np.diag(m0.data_cov))
        init_bounds = np.stack([m0.data_mean - 3 * sd, m0.data_mean + 3 * sd], axis=1)
    init_bounds = np.asarray(init_bounds, dtype=np.float64).reshape(d, 2)
    gens, _ = _chain_noise(cfg.seed, "ald_init", n, d)
    u = np.concatenate([g.uniform(size=(CHAIN_BLOCK, d)) for g in gens])[:n]
    x = init_bounds[:, 0] + u * (init_bounds[:, 1] - init_bounds[:, 0])
    gens, _ = _chain_noise(cfg.seed, "ald_noise", n, d)
    label = "langevin" if len(levels) == 1 else "annealed_langevin"
    diagnostics = []
    for i, (sigma, model) in enumerate(zip(levels, models)):
        alpha = cfg.step_size_base * sigma ** 2 / levels[-1] ** 2
        root = np.sqrt(alpha)
        score_norm = 0.0
        for _ in range(cfg.steps_per_level):
            score = model.score(x)
            x = x + 0.5 * alpha * score + root * _draw(gens, n, d)
            if not np.all(np.isfinite(x)) or np.abs(x).max() > DIVERGENCE_NORM:
                raise NumericError(f"Langevin chains diverged at level {i} (sigma={sigma:g})", node=f"level{i}")
            score_norm = float(np.linalg.norm(score, axis=1).mean())
        diagnostics.append({"sampler": label, "level": i, "sigma": sigma, "alpha": alpha,
                            "steps": cfg.steps_per_level, "mean_norm": float(np.linalg.norm(x, axis=1).mean()),
                            "score_norm": score_norm})
    return x, diagnostics


# -- sample files ------------------------------------------------------------

def save_samples_bin(samples, path) -> None:
    """Little-endian uint64 sample count, then row-major float64 values."""
    x = np.ascontiguousarray(np.atleast_2d(samples), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", x.shape[0]))
        fh.write(x.tobytes())


def load_samples_bin(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise ParseError(f"{path}: missing 8-byte count header")
        (count,) = struct.unpack("<Q", head)
        body = np.frombuffer(fh.read(), dtype="<f8")
    if count == 0 or body.size % count:
        raise ParseError(f"{path}: {body.size} values do not split into {count} rows")
    return body.reshape(count, body.size // count).astype(np.float64)
