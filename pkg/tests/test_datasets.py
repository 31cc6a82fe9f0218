import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ddegen.datasets import (SYNTHETIC, Dataset, MixtureSpec, checkerboard, checkerboard_on, gaussian,
                             gaussian_mixture_grid, grid_means, load_csv, make_synthetic, mixture_log_density,
                             save_csv, save_dataset, standardize_dataset, two_spirals)
from ddegen.errors import ConfigError, ContractError, ParseError


def test_spirals_stay_within_radius():
    ds = two_spirals(100000, noise_std=0.05, seed=0)
    assert ds.points.shape == (100000, 2)
    assert np.linalg.norm(ds.points, axis=1).max() <= 2.2


def test_spiral_arms_are_balanced():
    n = 100000
    ds = two_spirals(n, seed=3)
    k = int(ds.labels.sum())
    # two-sided binomial test at a strict level
    assert stats.binomtest(k, n, 0.5).pvalue > 1e-4
    assert abs(k - n / 2) < 5 * np.sqrt(n / 4)


@pytest.mark.parametrize("name", SYNTHETIC)
def test_synthetic_is_seed_deterministic(name):
    a, b, c = (make_synthetic(name, 500, seed=s) for s in (4, 4, 5))
    assert np.array_equal(a.points, b.points)
    assert not np.array_equal(a.points, c.points)
    assert a.dim == 2 and len(a) == 500


def test_checkerboard_predicate_and_uniformity():
    ds = checkerboard(100000, seed=0)
    assert checkerboard_on(ds.points).all()
    ij = np.floor(ds.points + 2.0).astype(int)
    assert ((ij.sum(axis=1) % 2) == 0).all()
    counts = np.bincount(ij[:, 0] * 4 + ij[:, 1], minlength=16)
    on = counts[[i * 4 + j for i in range(4) for j in range(4) if (i + j) % 2 == 0]]
    assert on.sum() == 100000
    assert stats.chisquare(on).pvalue > 1e-4


def test_checkerboard_support_is_half_the_box():
    # the on-squares cover exactly half of [-2, 2]^2: check on the cell-center lattice
    g = (np.arange(400) + 0.5) / 100 - 2.0
    gx, gy = np.meshgrid(g, g)
    assert checkerboard_on(np.stack([gx.ravel(), gy.ravel()], 1)).mean() == 0.5


def test_grid_samples_near_their_modes():
    ds, spec = gaussian_mixture_grid(100000, 5, 2.0, 0.1, seed=0)
    assert spec.n_components == 25
    off = ds.points - spec.means[ds.labels]
    # every coordinate within 3 std: 0.9973^2 = 0.9946 of samples
    assert (np.abs(off) <= 0.3).all(axis=1).mean() >= 0.99
    # Euclidean radius 3 std in 2-D holds with probability 1 - exp(-4.5) = 0.98889, not 0.99
    d = np.sqrt(((ds.points[:, None] - spec.means[None]) ** 2).sum(-1)).min(1)
    p = 1 - np.exp(-4.5)
    assert abs((d <= 0.3).mean() - p) < 5 * np.sqrt(p * (1 - p) / len(d))
    counts = np.bincount(ds.labels, minlength=25)
    assert stats.chisquare(counts).pvalue > 1e-4


def test_grid_is_centered():
    m = grid_means(5, 2.0)
    np.testing.assert_array_equal(m.mean(0), [0.0, 0.0])
    assert m.min() == -4.0 and m.max() == 4.0


def test_grid_with_one_component_is_gaussian():
    ds, spec = gaussian_mixture_grid(50000, 1, 2.0, 0.5, seed=1)
    np.testing.assert_array_equal(spec.means, [[0.0, 0.0]])
    assert np.abs(ds.points.mean(0)).max() < 0.02
    np.testing.assert_allclose(ds.points.std(0), 0.5, rtol=0.02)
    with pytest.raises(ContractError):
        gaussian_mixture_grid(10, 0)


def test_mixture_log_density_normalizer():
    spec = MixtureSpec([[0.0, 0.0]], 1.0)
    assert mixture_log_density(spec, [0.0, 0.0])[0] == pytest.approx(-np.log(2 * np.pi), abs=1e-12)
    assert mixture_log_density(spec, [0.0, 0.0])[0] == pytest.approx(-1.8379, abs=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_mixture_density_is_symmetric_on_grid(x, y):
    spec = MixtureSpec(grid_means(5, 2.0), 0.1)
    pts = np.array([[x, y], [-x, y], [x, -y], [-x, -y], [y, x]])
    v = mixture_log_density(spec, pts, 0.2)
    np.testing.assert_allclose(v, v[0], rtol=1e-10, atol=1e-10)


def test_convolved_density_is_lower_at_mode_centers():
    spec = MixtureSpec(grid_means(5, 2.0), 0.1)
    assert np.all(mixture_log_density(spec, spec.means, 0.2) < mixture_log_density(spec, spec.means))


def test_convolved_density_integrates_to_one():
    spec = MixtureSpec(grid_means(2, 1.0), 0.3)
    g = np.linspace(-4, 4, 801)
    gx, gy = np.meshgrid(g, g)
    p = np.exp(mixture_log_density(spec, np.stack([gx.ravel(), gy.ravel()], 1), 0.4))
    assert p.sum() * (g[1] - g[0]) ** 2 == pytest.approx(1.0, abs=1e-6)


def test_mixture_spec_validation():
    with pytest.raises(ConfigError):
        MixtureSpec(np.zeros((0, 2)), 0.1)
    with pytest.raises(ConfigError):
        MixtureSpec([[0.0, 0.0]], 0.0)


def test_gaussian_dataset_moments():
    ds = gaussian(100000, mean=(1.0, -2.0), std=0.5, seed=0)
    np.testing.assert_allclose(ds.points.mean(0), [1.0, -2.0], atol=0.01)
    np.testing.assert_allclose(ds.points.std(0), 0.5, rtol=0.01)


def test_make_synthetic_options():
    ds = make_synthetic("two_spirals", 10, noise_std=0.0)
    assert len(ds) == 10
    with pytest.raises(ConfigError):
        make_synthetic("moons", 10)
    with pytest.raises(ConfigError):
        make_synthetic("checkerboard", 10, noise_std=0.1)
    with pytest.raises(ContractError):
        make_synthetic("checkerboard", 0)


def test_dataset_validation():
    with pytest.raises(ConfigError):
        Dataset(np.zeros(3))
    with pytest.raises(ConfigError):
        Dataset(np.zeros((3, 2)), labels=np.zeros(2))


# -- CSV ---------------------------------------------------------------------

def test_csv_roundtrip_exact(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("0.1,2\n-3.5,1e-300\n7,0.30000000000000004\n")
    ds = load_csv(path)
    np.testing.assert_array_equal(ds.points, [[0.1, 2.0], [-3.5, 1e-300], [7.0, 0.30000000000000004]])
    out = tmp_path / "b.csv"
    save_csv(ds.points, out)
    assert np.array_equal(load_csv(out).points, ds.points)


def test_header_is_detected_and_logged(tmp_path, caplog):
    path = tmp_path / "h.csv"
    path.write_text("x,y\n1,2\n3,4\n")
    with caplog.at_level(logging.INFO, logger="ddegen.datasets"):
        ds = load_csv(path)
    assert ds.points.shape == (2, 2)
    assert "header" in caplog.text


def test_standardization_is_exact_and_invertible(tmp_path):
    rng = np.random.default_rng(0)
    raw = rng.normal([3.0, -100.0, 0.0], [2.0, 50.0, 1e-3], size=(1000, 3))
    path = tmp_path / "s.csv"
    save_csv(raw, path, header=["a", "b", "c"])
    ds = load_csv(path, standardize=True)
    assert np.abs(ds.points.mean(0)).max() < 1e-12
    assert np.abs(ds.points.std(0) - 1).max() < 1e-12
    assert np.abs(ds.standardization.invert(ds.points) - raw).max() < 1e-12
    assert ds.standardization.log_jacobian == pytest.approx(-np.log(raw.std(0)).sum())


def test_constant_column_is_left_unscaled():
    ds = standardize_dataset(Dataset(np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])))
    np.testing.assert_array_equal(ds.points[:, 1], 0.0)


@pytest.mark.parametrize("text, row, col", [
    ("1,2\n3\n", 2, None),
    ("1,2\n3,abc\n", 2, 2),
    ("a,b\n1,2\n1,2,3\n", 3, None),
])
def test_csv_parse_errors_locate_the_cell(tmp_path, text, row, col):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(ParseError) as info:
        load_csv(path)
    assert info.value.row == row
    if col is not None:
        assert info.value.col == col


@pytest.mark.parametrize("text", ["", "\n\n", "x,y\n"])
def test_csv_without_data_rejected(tmp_path, text):
    path = tmp_path / "e.csv"
    path.write_text(text)
    with pytest.raises(ParseError):
        load_csv(path)


def test_save_dataset_writes_manifest(tmp_path):
    import json

    ds = standardize_dataset(gaussian(20, seed=0))
    save_dataset(ds, tmp_path / "g.csv", tmp_path / "g.json")
    doc = json.loads((tmp_path / "g.json").read_text())
    assert doc["dim"] == 2 and doc["n"] == 20 and set(doc["standardization"]) == {"mean", "std"}
    assert load_csv(tmp_path / "g.csv").points.shape == (20, 2)
