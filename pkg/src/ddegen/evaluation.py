"""Density grids, importance-sampled normalizers, log-likelihood and mode coverage."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .datasets import MixtureSpec
from .diffengine import kernels
from .errors import ConfigError, ContractError, EstimationError
from .rng import stream

ENERGY_CHUNK = 16384


def _energy_fn(energy):
    fn = getattr(energy, "energy", energy)
    if not callable(fn):
        raise ConfigError("energy must be a DdeModel or a callable x -> s(x)")
    return fn


def _chunked(fn, x):
    parts = kernels.map_chunks(lambda lo, hi: np.asarray(fn(x[lo:hi]), dtype=np.float64).reshape(-1),
                               x.shape[0], ENERGY_CHUNK)
    return np.concatenate(parts)


# -- density grid ------------------------------------------------------------

@dataclass
class DensityGrid:
    bounds: tuple  # ((x_lo, x_hi), (y_lo, y_hi))
    resolution: tuple  # (nx, ny)
    values: np.ndarray  # shape (ny, nx); row i is y-center i, ascending

    def centers(self):
        (x0, x1), (y0, y1) = self.bounds
        nx, ny = self.resolution
        xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
        ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
        return xs, ys

    def points(self) -> np.ndarray:
        xs, ys = self.centers()
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def total_variation(self) -> float:
        """Sum of absolute differences between neighbouring cells of exp(s), normalized to sum 1."""
        p = np.exp(self.values - self.values.max())
        p /= p.sum()
        return float(np.abs(np.diff(p, axis=0)).sum() + np.abs(np.diff(p, axis=1)).sum())

    def to_csv(self, path) -> None:
        pts = self.points()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "s"])
            for (x, y), s in zip(pts, self.values.ravel()):
                w.writerow([format(x, ".17g"), format(y, ".17g"), format(float(s), ".17g")])

    def to_ppm(self, path, exponentiate: bool = True) -> None:
        """Binary P6 heatmap. Top image row is the highest y; pixels are min-max scaled."""
        v = self.values
        if exponentiate:
            v = np.exp(v - v.max())
        lo, hi = float(v.min()), float(v.max())
        t = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
        rgb = _heat(t[::-1])
        ny, nx = v.shape
        with open(path, "wb") as fh:
            fh.write(f"P6\n{nx} {ny}\n255\n".encode("ascii"))
            fh.write(rgb.astype(np.uint8).tobytes())


def _heat(t):
    """Black -> red -> yellow -> white ramp, values in [0, 1] to 0..255 RGB."""
    r = np.clip(3 * t, 0, 1)
    g = np.clip(3 * t - 1, 0, 1)
    b = np.clip(3 * t - 2, 0, 1)
    return np.rint(np.stack([r, g, b], axis=-1) * 255)


def density_grid(dde, bounds=((-2.0, 2.0), (-2.0, 2.0)), resolution=100) -> DensityGrid:
    """Energy at cell centers of a 2-D box. ``resolution`` is an int or (nx, ny)."""
    dim = getattr(dde, "dim", 2)
    if dim != 2:
        raise ConfigError(f"density grids are only supported for 2-D models, got dim={dim}")
    res = (resolution, resolution) if np.isscalar(resolution) else tuple(resolution)
    if min(res) < 1:
        raise ConfigError("grid resolution must be >= 1")
    bounds = tuple(tuple(float(v) for v in b) for b in bounds)
    grid = DensityGrid(bounds, (int(res[0]), int(res[1])), np.empty((res[1], res[0])))
    vals = _chunked(_energy_fn(dde), grid.points())
    grid.values = vals.reshape(res[1], res[0])
    return grid


# -- normalizing constant ----------------------------------------------------

@dataclass
class LogZEstimate:
    log_z: float
    repeats: int
    samples_per_repeat: int
    variance: float  # sample variance of the per-repeat estimates
    estimates: list = field(default_factory=list)

    @property
    def variance_of_mean(self) -> float:
        return self.variance / self.repeats

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variance_of_mean"] = self.variance_of_mean
        return d


def estimate_log_partition(energy, mean=None, cov=None, n_per: int = 51200, repeats: int = 5,
                           seed: int = 0, diagonal: bool = False) -> LogZEstimate:
    """log of the integral of exp(s(x)), by importance sampling from N(mean, cov).

    Defaults to the moments recorded on a DDE (the distribution of its
    training inputs). ``diagonal=True`` drops off-diagonal covariance.
    Weights are combined with log-sum-exp; repeats use independent streams.
    """
    if mean is None:
        mean = getattr(energy, "data_mean", None)
    if cov is None:
        cov = getattr(energy, "data_cov", None)
    if mean is None or cov is None:
        raise ConfigError("no proposal given and the energy has no recorded data moments")
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    cov = np.asarray(cov, dtype=np.float64)
    d = mean.size
    if cov.ndim == 0:
        cov = float(cov) * np.eye(d)
    elif cov.ndim == 1:
        cov = np.diag(cov)
    if diagonal:
        cov = np.diag(np.diag(cov))
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ConfigError("proposal covariance must be positive definite") from None
    if repeats < 1 or n_per < 1:
        raise ContractError("need repeats >= 1 and n_per >= 1")
    fn = _energy_fn(energy)
    log_norm = np.log(np.diag(L)).sum() + 0.5 * d * np.log(2 * np.pi)
    estimates = []
    for r in range(repeats):
        eps = stream(seed, "logz", r).standard_normal((n_per, d))
        x = mean + eps @ L.T
        logq = -0.5 * np.sum(eps ** 2, axis=1) - log_norm
        logw = _chunked(fn, x) - logq
        if not np.any(np.isfinite(logw)):
            raise EstimationError("all importance weights are zero or non-finite")
        estimates.append(float(logsumexp(logw) - np.log(n_per)))
    est = np.array(estimates)
    var = float(est.var(ddof=1)) if repeats > 1 else float("nan")
    return LogZEstimate(float(est.mean()), repeats, n_per, var, estimates)


def avg_log_likelihood(dde, log_z: LogZEstimate, test) -> float:
    """Mean of s(x) - log Z over the test set (units of the data the DDE saw)."""
    pts = np.asarray(getattr(test, "points", test), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ContractError("test set must be a non-empty (N, n) array")
    dim = getattr(dde, "dim", pts.shape[1])
    if pts.shape[1] != dim:
        raise ConfigError(f"test dimension {pts.shape[1]} does not match model dimension {dim}")
    s = _chunked(_energy_fn(dde), pts)
    return float(s.mean() - log_z.log_z)


# -- mode coverage -----------------------------------------------------------

@dataclass
class ModeReport:
    modes_hit: int
    total_modes: int
    histogram: list
    reverse_kl: float
    unassigned_fraction: float
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)


def mode_coverage(samples, spec: MixtureSpec, radius_sigmas: float = 3.0) -> ModeReport:
    """Assign samples to the nearest mode within ``radius_sigmas * std``.

    ``reverse_kl`` is KL(histogram || uniform) over the assigned samples,
    with 0 log 0 = 0; it is 0 exactly when every mode gets the same count.
    """
    if not radius_sigmas > 0:
        raise ContractError("radius_sigmas must be positive")
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.shape[1] != spec.dim:
        raise ConfigError(f"samples have dimension {x.shape[1]}, mixture has {spec.dim}")
    K = spec.n_components
    d2 = ((x[:, None, :] - spec.means[None, :, :]) ** 2).sum(axis=-1)
    nearest = d2.argmin(axis=1)
    ok = d2[np.arange(x.shape[0]), nearest] <= (radius_sigmas * spec.std) ** 2
    hist = np.bincount(nearest[ok], minlength=K)
    assigned = int(hist.sum())
    if assigned:
        h = hist / assigned
        nz = h > 0
        rkl = float(np.sum(h[nz] * np.log(h[nz] * K)))
    else:
        rkl = math.inf
    n = x.shape[0]
    return ModeReport(int((hist > 0).sum()), K, hist.tolist(), max(rkl, 0.0),
                      (n - assigned) / n if n else 0.0, n)


__all__ = [
    "DensityGrid", "density_grid", "LogZEstimate", "estimate_log_partition", "avg_log_likelihood",
    "ModeReport", "mode_coverage",
]
