"""Synthetic 2D datasets with analytic oracles, and tabular CSV ingestion."""

from __future__ import annotations

import csv
import inspect
import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, ContractError, ParseError
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    @property
    def log_jacobian(self) -> float:
        """Add to a standardized-space log-density to get data-space units."""
        return float(-np.log(self.std).sum())


@dataclass
class Dataset:
    points: np.ndarray
    name: str = "data"
    standardization: Standardization | None = None
    labels: np.ndarray | None = None  # component / arm index per point, when known

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise ConfigError(f"dataset points must be 2-D, got shape {self.points.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (self.points.shape[0],):
                raise ConfigError("labels must have one entry per point")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]

    def manifest(self) -> dict:
        st = None
        if self.standardization is not None:
            st = {"mean": self.standardization.mean.tolist(), "std": self.standardization.std.tolist()}
        return {"name": self.name, "dim": self.dim, "n": len(self), "standardization": st}


@dataclass
class MixtureSpec:
    """Equal-weight isotropic Gaussian mixture."""

    means: np.ndarray
    std: float

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        if self.means.shape[0] < 1:
            raise ConfigError("mixture needs at least one component")
        if not self.std > 0:
            raise ConfigError(f"mixture std must be positive, got {self.std}")

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        labels = rng.integers(0, self.n_components, n)
        return self.means[labels] + self.std * rng.standard_normal((n, self.dim)), labels


def _check_n(n):
    if n < 1:
        raise ContractError(f"need n >= 1 samples, got {n}")


def two_spirals(n: int, noise_std: float = 0.05, seed: int = 0) -> Dataset:
    """Two interleaved Archimedean spirals of outer radius 2, arms picked by a fair coin."""
    _check_n(n)
    rng = stream(seed, "two_spirals")
    t = 1.5 * np.pi * (1.0 + 2.0 * rng.uniform(size=n))
    arm = np.stack([-t * np.cos(t), t * np.sin(t)], axis=1) * (2.0 / (4.5 * np.pi))
    flip = rng.uniform(size=n) < 0.5
    arm[flip] *= -1.0
    pts = arm + noise_std * rng.standard_normal((n, 2))
    return Dataset(pts, "two_spirals", labels=flip.astype(np.int64))


def spiral_curve(m: int = 2000) -> np.ndarray:
    """Dense noise-free points on both arms (for distance oracles)."""
    t = np.linspace(1.5 * np.pi, 4.5 * np.pi, m)
    a = np.stack([-t * np.cos(t), t * np.sin(t)], axis=1) * (2.0 / (4.5 * np.pi))
    return np.concatenate([a, -a])


def checkerboard(n: int, seed: int = 0) -> Dataset:
    """Uniform over unit squares (i, j) of [-2, 2]^2 with i + j even (8 of 16)."""
    _check_n(n)
    rng = stream(seed, "checkerboard")
    on = np.array([(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0], dtype=np.float64)
    cell = on[rng.integers(0, len(on), n)]
    return Dataset(cell - 2.0 + rng.uniform(size=(n, 2)), "checkerboard")


def checkerboard_on(x) -> np.ndarray:
    """True where points fall in an "on" square of the checkerboard."""
    x = np.atleast_2d(x)
    ij = np.floor(x + 2.0)
    inside = np.all((ij >= 0) & (ij <= 3), axis=1)
    return inside & (ij.sum(axis=1) % 2 == 0)


def grid_means(k_side: int, spacing: float) -> np.ndarray:
    c = (np.arange(k_side) - (k_side - 1) / 2.0) * spacing
    gx, gy = np.meshgrid(c, c, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def gaussian_mixture_grid(n: int, k_side: int = 5, spacing: float = 2.0, std: float = 0.1,
                          seed: int = 0) -> tuple[Dataset, MixtureSpec]:
    _check_n(n)
    if k_side < 1:
        raise ContractError(f"k_side must be >= 1, got {k_side}")
    spec = MixtureSpec(grid_means(k_side, spacing), std)
    pts, labels = spec.sample(n, stream(seed, "gaussian_grid"))
    return Dataset(pts, "gaussian_grid", labels=labels), spec


def mixture_log_density(spec: MixtureSpec, x, sigma_eta: float = 0.0) -> np.ndarray:
    """Exact normalized log-density; ``sigma_eta > 0`` gives the noise-convolved mixture."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    var = spec.std ** 2 + sigma_eta ** 2
    d2 = ((x[:, None, :] - spec.means[None, :, :]) ** 2).sum(axis=-1)
    logk = -0.5 * d2 / var - 0.5 * spec.dim * np.log(2 * np.pi * var)
    return logsumexp(logk, axis=1) - np.log(spec.n_components)


SYNTHETIC = ("two_spirals", "checkerboard", "gaussian_grid", "gaussian")


def gaussian(n: int, mean=(0.0, 0.0), std: float = 1.0, seed: int = 0) -> Dataset:
    """Isotropic Gaussian N(mean, std^2 I)."""
    _check_n(n)
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    if not std > 0:
        raise ConfigError(f"std must be positive, got {std}")
    return Dataset(mean + std * stream(seed, "gaussian").standard_normal((n, mean.size)), "gaussian")


def _grid(n, k_side=5, spacing=2.0, std=0.1, seed=0):
    return gaussian_mixture_grid(n, k_side, spacing, std, seed)[0]


_MAKERS = {"two_spirals": two_spirals, "checkerboard": checkerboard, "gaussian_grid": _grid, "gaussian": gaussian}


def make_synthetic(name: str, n: int, seed: int = 0, **params) -> Dataset:
    """Build a named synthetic dataset; ``params`` are the generator's keyword options."""
    if name not in _MAKERS:
        raise ConfigError(f"unknown dataset {name!r}; choose from {', '.join(SYNTHETIC)}")
    maker = _MAKERS[name]
    allowed = set(inspect.signature(maker).parameters) - {"n", "seed"}
    unknown = set(params) - allowed
    if unknown:
        raise ConfigError(f"unknown options for {name}: {sorted(unknown)}; allowed {sorted(allowed)}")
    return maker(n, seed=seed, **params)


# -- CSV -------------------------------------------------------------------

def _is_number(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def load_csv(path, standardize: bool = False, name: str | None = None) -> Dataset:
    """Read a rectangular numeric CSV; a non-numeric first row is taken as a header."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{path}: empty file")
    start = 0
    if not all(_is_number(c) for c in rows[0]):
        log.info("%s: skipping header row %r", path, rows[0])
        start = 1
    width = len(rows[0])
    data = np.empty((len(rows) - start, width))
    for i, row in enumerate(rows[start:], start=start + 1):
        if len(row) != width:
            raise ParseError(f"{path}: ragged row with {len(row)} cells, expected {width}", row=i)
        for j, cell in enumerate(row, start=1):
            try:
                data[i - start - 1, j - 1] = float(cell)
            except ValueError:
                raise ParseError(f"{path}: non-numeric cell {cell!r}", row=i, col=j) from None
    if data.shape[0] == 0:
        raise ParseError(f"{path}: no data rows")
    ds = Dataset(data, name or str(path))
    return standardize_dataset(ds) if standardize else ds


def standardize_dataset(ds: Dataset) -> Dataset:
    mean = ds.points.mean(axis=0)
    std = ds.points.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    st = Standardization(mean, std)
    return Dataset(st.apply(ds.points), ds.name, st)


def save_csv(points, path, header=None) -> None:
    points = np.atleast_2d(points)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(header)
        for row in points:
            w.writerow([format(float(v), ".17g") for v in row])


def save_dataset(ds: Dataset, csv_path, manifest_path) -> None:
    save_csv(ds.points, csv_path, header=[f"x{i}" for i in range(ds.dim)])
    with open(manifest_path, "w") as fh:
        json.dump(ds.manifest(), fh, indent=1)
        fh.write("\n")
