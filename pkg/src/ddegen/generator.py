"""One-step generators trained by reverse-KL descent against DDEs.

Each outer step moves the generator parameters down the gradient of
``E[s_q(g(z) + eta) - s_p(g(z) + eta)]`` with both energies frozen, then
refreshes ``s_q`` with a few DDE steps on fresh samples of the updated
generator. The additive constants of both energies drop out of the
gradient, so only their input gradients are ever evaluated.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .dde import DdeModel, LrDecay, dde_from_checkpoint, dde_loss, dde_train_step, save_dde
from .diffengine import kernels
from .errors import ConfigError, ContractError, NumericError
from .network import (MlpConfig, MlpParams, encode_floats, generator_forward, init_mlp, load_checkpoint,
                      save_checkpoint)
from .optim import Adam
from .rng import stream

log = logging.getLogger(__name__)


class RegularizedCovarianceWarning(UserWarning):
    """The moment-fitted covariance was singular and got a 1e-6 ridge."""


@dataclass
class GeneratorModel:
    params: MlpParams

    @property
    def latent_dim(self) -> int:
        return self.params.config.in_dim

    @property
    def dim(self) -> int:
        return self.params.config.out_dim

    def __call__(self, z):
        return generator_forward(self.params, z)


def init_generator(config: MlpConfig, seed: int, match_mean=None, match_std=None,
                   n_probe: int = 4096) -> GeneratorModel:
    """Random generator; optionally rescale the output layer to given moments.

    With ``match_mean``/``match_std`` the output adapter is adjusted so a
    probe batch of ``g(z)`` has exactly those per-dimension moments, which
    puts the initial samples over the data instead of near the origin.
    """
    gen = GeneratorModel(init_mlp(config, seed))
    if match_mean is None and match_std is None:
        return gen
    z = stream(seed, "init_probe").standard_normal((n_probe, config.in_dim))
    y = gen(z)
    mu, sd = y.mean(axis=0), y.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    tgt_mu = mu if match_mean is None else np.broadcast_to(np.asarray(match_mean, float), mu.shape)
    tgt_sd = sd if match_std is None else np.broadcast_to(np.asarray(match_std, float), sd.shape)
    W_name, b_name = ("out.W", "out.b") if config.residual else (f"layer{config.layers - 1}.W",
                                                                  f"layer{config.layers - 1}.b")
    W, b = gen.params.view(W_name), gen.params.view(b_name)
    ratio = tgt_sd / sd
    W *= ratio[:, None]
    b[:] = (b - mu) * ratio + tgt_mu
    return gen


@dataclass
class GenTrainConfig:
    gen_lr: float = 1e-4
    gen_lr_decay: LrDecay = field(default_factory=LrDecay)
    dde_inner_steps: int = 10
    dde_lr: float = 1e-4
    q_init_steps: int = 1000
    batch_size: int = 2048
    outer_steps: int = 5000
    latent_dim: int = 2
    sigma_eta: float = 0.1
    seed: int = 0
    checkpoint_every: int = 200
    diagnostic_samples: int = 10000
    match_data_moments: bool = False

    def __post_init__(self):
        if isinstance(self.gen_lr_decay, dict):
            self.gen_lr_decay = LrDecay(**self.gen_lr_decay)
        if self.dde_inner_steps < 1:
            raise ContractError("dde_inner_steps must be >= 1")
        if not self.sigma_eta > 0:
            raise ConfigError(f"sigma_eta must be positive, got {self.sigma_eta}")
        if self.gen_lr < 0 or self.dde_lr < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.batch_size < 1 or self.latent_dim < 1 or self.checkpoint_every < 1:
            raise ConfigError("batch_size, latent_dim and checkpoint_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenTrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class GenTrainState:
    generator: GeneratorModel
    q_dde: DdeModel
    gen_opt: Adam
    q_opt: Adam
    step: int = 0
    trace: list = field(default_factory=list)  # (outer_step, gen_loss, q_dde_loss, diagnostic_kl)
    window: list = field(default_factory=list)  # per-step (gen_loss, q_loss) since last checkpoint


def _check_sigma(q_dde: DdeModel, p_dde: DdeModel):
    if not np.isclose(q_dde.sigma_eta, p_dde.sigma_eta, rtol=1e-12, atol=0.0):
        raise ConfigError(f"DDE noise levels differ: q {q_dde.sigma_eta} vs p {p_dde.sigma_eta}")


def generator_loss_and_grad(gen: GeneratorModel, q_dde: DdeModel, p_dde: DdeModel, z_batch, eta_batch):
    """Mean of s_q(g(z)+eta) - s_p(g(z)+eta) and its gradient in the generator parameters."""
    _check_sigma(q_dde, p_dde)
    z = np.asarray(z_batch, dtype=np.float64)
    eta = np.asarray(eta_batch, dtype=np.float64)
    cfg = gen.params.config
    x = gen(z) + eta
    sq, gq = q_dde.energy_and_score(x)
    sp, gp = p_dde.energy_and_score(x)
    B = z.shape[0]
    _, grad = kernels.vjp(cfg, gen.params.flat, z, (gq - gp) / B)
    return float(np.mean(sq - sp)), grad


def generator_loss(gen: GeneratorModel, q_dde: DdeModel, p_dde: DdeModel, z_batch, eta_batch) -> float:
    _check_sigma(q_dde, p_dde)
    x = gen(np.asarray(z_batch, dtype=np.float64)) + np.asarray(eta_batch, dtype=np.float64)
    return float(np.mean(q_dde.energy(x) - p_dde.energy(x)))


def generator_step(state: GenTrainState, p_dde: DdeModel, cfg: GenTrainConfig, rng) -> float:
    """One descent step on the generator with both DDEs frozen; returns the pre-update loss."""
    z = rng.standard_normal((cfg.batch_size, state.generator.latent_dim))
    eta = cfg.sigma_eta * rng.standard_normal((cfg.batch_size, state.generator.dim))
    loss, grad = generator_loss_and_grad(state.generator, state.q_dde, p_dde, z, eta)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite generator gradient", node="generator_step")
    lr = cfg.gen_lr_decay.at(cfg.gen_lr, state.step)
    state.gen_opt.step(state.generator.params.flat, grad, lr)
    return loss


def sample_generator(gen: GeneratorModel, n: int, rng) -> np.ndarray:
    return gen(rng.standard_normal((n, gen.latent_dim)))


def refresh_q_dde(state: GenTrainState, cfg: GenTrainConfig, rng, steps: int | None = None) -> float:
    """A few DDE steps on fresh generator samples; returns the mean pre-update loss."""
    steps = cfg.dde_inner_steps if steps is None else steps
    if steps < 1:
        raise ContractError("refresh needs at least one DDE step")
    total = 0.0
    for _ in range(steps):
        batch = sample_generator(state.generator, cfg.batch_size, rng)
        total += dde_train_step(state.q_dde, batch, cfg.sigma_eta, state.q_opt, rng, cfg.dde_lr)
    return total / steps


def new_gen_state(p_dde: DdeModel, gen_cfg: MlpConfig, q_cfg: MlpConfig, cfg: GenTrainConfig) -> GenTrainState:
    if not np.isclose(cfg.sigma_eta, p_dde.sigma_eta, rtol=1e-12, atol=0.0):
        raise ConfigError(f"config sigma_eta {cfg.sigma_eta} differs from the data DDE's {p_dde.sigma_eta}")
    if gen_cfg.out_dim != p_dde.dim or q_cfg.in_dim != p_dde.dim:
        raise ConfigError("generator output / q-DDE input must match the data dimension")
    if gen_cfg.in_dim != cfg.latent_dim:
        raise ConfigError(f"generator input {gen_cfg.in_dim} != latent_dim {cfg.latent_dim}")
    if cfg.match_data_moments:
        if p_dde.data_mean is None:
            raise ConfigError("match_data_moments needs a DDE with recorded data moments")
        gen = init_generator(gen_cfg, cfg.seed, p_dde.data_mean, np.sqrt(np.diag(p_dde.data_cov)))
    else:
        gen = init_generator(gen_cfg, cfg.seed)
    q = DdeModel(init_mlp(q_cfg, cfg.seed + 1), cfg.sigma_eta)
    state = GenTrainState(gen, q, Adam(gen.params.flat.size), Adam(q.params.flat.size))
    if cfg.q_init_steps:
        refresh_q_dde(state, cfg, stream(cfg.seed, "q_init"), steps=cfg.q_init_steps)
    return state


def train_generator(p_dde: DdeModel, gen_cfg: MlpConfig, q_cfg: MlpConfig, cfg: GenTrainConfig,
                    target=None, state: GenTrainState | None = None, stop_at: int | None = None,
                    callback=None):
    """Run the outer loop; returns ``(generator, state)``.

    ``target`` (a :class:`GaussianTarget` or mixture spec) enables the
    reverse-KL diagnostic recorded every ``cfg.checkpoint_every`` steps.
    Outer step ``k`` draws from the streams ``(seed, "gen_step", k)`` and
    ``(seed, "q_refresh", k)``, so runs resume exactly.
    """
    if state is None:
        state = new_gen_state(p_dde, gen_cfg, q_cfg, cfg)
    _check_sigma(state.q_dde, p_dde)
    end = cfg.outer_steps if stop_at is None else min(stop_at, cfg.outer_steps)
    while state.step < end:
        k = state.step
        gl = generator_step(state, p_dde, cfg, stream(cfg.seed, "gen_step", k))
        ql = refresh_q_dde(state, cfg, stream(cfg.seed, "q_refresh", k))
        state.window.append((gl, ql))
        state.step += 1
        if state.step % cfg.checkpoint_every == 0 or state.step == cfg.outer_steps:
            _checkpoint(state, cfg, target)
        if callback is not None:
            callback(state)
    return state.generator, state


def _checkpoint(state: GenTrainState, cfg: GenTrainConfig, target):
    w = np.array(state.window) if state.window else np.full((1, 2), np.nan)
    kl = float("nan")
    if target is not None:
        samples = sample_generator(state.generator, cfg.diagnostic_samples,
                                   stream(cfg.seed, "diagnostic", state.step))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RegularizedCovarianceWarning)
            kl = reverse_kl_diagnostic(samples, target)
    row = (state.step, float(w[:, 0].mean()), float(w[:, 1].mean()), kl)
    state.trace.append(row)
    state.window = []
    log.info("outer step %d: gen_loss %.4f q_loss %.4f kl %.4g", *row)


# -- diagnostics -------------------------------------------------------------

@dataclass
class GaussianTarget:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.ndim == 0:
            cov = cov * np.eye(self.mean.size)
        elif cov.ndim == 1:
            cov = np.diag(cov)
        self.cov = cov

    def log_density(self, x):
        x = np.atleast_2d(x)
        d = self.mean.size
        L = np.linalg.cholesky(self.cov)
        sol = np.linalg.solve(L, (x - self.mean).T)
        return -0.5 * np.sum(sol ** 2, axis=0) - np.log(np.diag(L)).sum() - 0.5 * d * np.log(2 * np.pi)


def gaussian_kl(mu0, cov0, mu1, cov1) -> float:
    """KL(N(mu0, cov0) || N(mu1, cov1)) in closed form."""
    mu0, mu1 = np.atleast_1d(mu0), np.atleast_1d(mu1)
    cov0, cov1 = np.atleast_2d(cov0), np.atleast_2d(cov1)
    k = mu0.size
    L1 = np.linalg.cholesky(cov1)
    inv1 = np.linalg.inv(cov1)
    d = mu1 - mu0
    _, logdet0 = np.linalg.slogdet(cov0)
    logdet1 = 2.0 * np.log(np.diag(L1)).sum()
    return float(0.5 * (np.trace(inv1 @ cov0) + d @ inv1 @ d - k + logdet1 - logdet0))


def fit_gaussian(samples):
    """Moment fit; returns (mean, cov, regularized)."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False)) if x.shape[0] > 1 else np.zeros((x.shape[1],) * 2)
    regularized = False
    try:
        np.linalg.cholesky(cov)
        if np.linalg.cond(cov) > 1e12:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        cov = cov + 1e-6 * np.eye(cov.shape[0])
        regularized = True
    return mu, cov, regularized


def reverse_kl_diagnostic(samples, target) -> float:
    """Reverse KL from the generated samples to ``target``.

    Gaussian targets use the closed form between the moment-fitted Gaussian
    and the target; a singular fit gets a 1e-6 ridge and a
    :class:`RegularizedCovarianceWarning`. Mixture targets use the
    mode-histogram reverse KL from :func:`ddegen.evaluation.mode_coverage`.
    """
    if isinstance(target, GaussianTarget):
        mu, cov, reg = fit_gaussian(samples)
        if reg:
            warnings.warn("fitted covariance is singular; added 1e-6 I", RegularizedCovarianceWarning,
                          stacklevel=2)
        return gaussian_kl(mu, cov, target.mean, target.cov)
    from .datasets import MixtureSpec
    from .evaluation import mode_coverage

    if isinstance(target, MixtureSpec):
        return mode_coverage(samples, target).reverse_kl
    raise ConfigError(f"unsupported diagnostic target {type(target).__name__}")


# -- persistence -------------------------------------------------------------

def save_generator(path, gen: GeneratorModel, sigma_eta: float, state: GenTrainState | None = None,
                   extra: dict | None = None) -> None:
    meta = dict(extra or {})
    if state is not None:
        meta["step"] = state.step
        meta["optimizer"] = state.gen_opt.to_json()
        meta["window"] = [encode_floats(row) for row in state.window]
    save_checkpoint(path, "generator", gen.params, sigma_eta, meta)


def save_gen_state(gen_path, q_path, state: GenTrainState, extra: dict | None = None) -> None:
    """Generator and q-DDE checkpoints that together allow exact resume."""
    save_generator(gen_path, state.generator, state.q_dde.sigma_eta, state, extra)
    save_dde(q_path, state.q_dde, None, {"optimizer": state.q_opt.to_json(), "step": state.step})


def load_generator(path) -> GeneratorModel:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "generator":
        raise ConfigError(f"expected a generator checkpoint, got kind {ckpt.kind!r}")
    return GeneratorModel(ckpt.params)


def load_gen_state(gen_path, q_path) -> GenTrainState:
    g = load_checkpoint(gen_path)
    if g.kind != "generator" or "optimizer" not in g.meta:
        raise ConfigError(f"{gen_path} is not a resumable generator checkpoint")
    q = load_checkpoint(q_path)
    q_model, _ = dde_from_checkpoint(q)
    if "optimizer" not in q.meta:
        raise ConfigError(f"{q_path} is not a resumable q-DDE checkpoint")
    window = [tuple(float(v) for v in row) for row in g.meta.get("window", [])]
    return GenTrainState(GeneratorModel(g.params), q_model, Adam.from_json(g.meta["optimizer"]),
                         Adam.from_json(q.meta["optimizer"]), int(g.meta["step"]), [], window)
