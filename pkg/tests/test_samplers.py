import numpy as np
import pytest

from ddegen.dde import AnalyticEnergy, DdeModel, gaussian_energy
from ddegen.errors import ConfigError, ContractError, ModelKindError, NumericError, ParseError
from ddegen.generator import GeneratorModel, init_generator
from ddegen.network import MlpConfig, MlpParams, count_evaluations, identity_mlp, init_mlp, param_count
from ddegen.samplers import (AldConfig, default_levels, load_samples_bin, sample_ald, sample_direct,
                             save_samples_bin)


def identity_generator(d=2):
    return GeneratorModel(identity_mlp(MlpConfig(d, d, 1, d, residual=False)))


def test_identity_generator_gives_standard_normal():
    x = sample_direct(identity_generator(), 100000, seed=0)
    assert x.shape == (100000, 2)
    assert np.abs(x.mean(0)).max() < 0.05
    assert np.linalg.norm(np.cov(x, rowvar=False) - np.eye(2)) < 0.05


def test_direct_sampling_contracts():
    gen = identity_generator()
    with pytest.raises(ContractError):
        sample_direct(gen, 0)
    dde = DdeModel(init_mlp(MlpConfig(2, 1, 1, 4), 0), 0.1)
    with pytest.raises(ModelKindError):
        sample_direct(dde, 10)


def test_direct_sampling_is_seeded():
    gen = init_generator(MlpConfig(2, 2, 3, 8), 0)
    a, b, c = sample_direct(gen, 50, 1), sample_direct(gen, 50, 1), sample_direct(gen, 50, 2)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_direct_sampling_costs_one_evaluation_per_sample():
    gen = init_generator(MlpConfig(2, 2, 3, 8), 0)
    with count_evaluations() as n:
        sample_direct(gen, 300)
    assert n() == 300


def test_ald_matches_gaussian_stationary_law():
    oracle = gaussian_energy([0.0, 0.0], 1.0, 0.5)  # smoothed covariance 1.25 I
    cfg = AldConfig([0.5], steps_per_level=200, step_size_base=0.1, seed=0)
    x, diag = sample_ald(oracle, cfg, 10000)
    cov = np.cov(x, rowvar=False)
    np.testing.assert_allclose(np.diag(cov), 1.25, rtol=0.1)
    assert abs(cov[0, 1]) < 0.1
    assert len(diag) == 1


def test_ald_with_zero_score_returns_initial_states():
    zero = AnalyticEnergy(lambda x: np.zeros(len(x)), np.zeros_like, 0.1, 2)
    bounds = [[-1.0, 2.0], [0.0, 0.5]]
    cfg = AldConfig([0.3, 0.1], steps_per_level=5, step_size_base=0.0)
    x, _ = sample_ald(zero, cfg, 700, init_bounds=bounds)
    assert x.shape == (700, 2)
    assert np.all((x >= [-1.0, 0.0]) & (x <= [2.0, 0.5]))
    assert np.all(np.ptp(x, axis=0) > [2.9, 0.45])


def test_single_level_is_plain_langevin():
    oracle = gaussian_energy([0.0, 0.0], 1.0, 0.5)
    _, diag = sample_ald(oracle, AldConfig([0.5], steps_per_level=3), 10)
    assert diag[0]["sampler"] == "langevin"
    _, diag = sample_ald(oracle, AldConfig([1.0, 0.5], steps_per_level=3), 10)
    assert [d["sampler"] for d in diag] == ["annealed_langevin"] * 2
    assert diag[1]["alpha"] == pytest.approx(AldConfig().step_size_base)
    assert diag[0]["alpha"] == pytest.approx(4 * diag[1]["alpha"])


def test_ald_chains_depend_only_on_their_own_stream():
    oracle = gaussian_energy([0.0, 0.0], 1.0, 0.5)
    cfg = AldConfig([1.0, 0.5], steps_per_level=10, step_size_base=0.05, seed=4)
    a, _ = sample_ald(oracle, cfg, 600)
    b, _ = sample_ald(oracle, cfg, 300)
    np.testing.assert_array_equal(a[:300], b)


def test_ald_per_level_models():
    m1 = gaussian_energy([0.0, 0.0], 1.0, 1.0)
    m2 = gaussian_energy([0.0, 0.0], 1.0, 0.5)
    cfg = AldConfig([1.0, 0.5], steps_per_level=2)
    x, diag = sample_ald([m1, m2], cfg, 8, init_bounds=[[-1, 1], [-1, 1]])
    assert x.shape == (8, 2) and len(diag) == 2
    with pytest.raises(ConfigError):
        sample_ald([m1], cfg, 8, init_bounds=[[-1, 1], [-1, 1]])


def test_ald_divergence_reports_the_level():
    # an exploding score: positive-definite "precision" with the wrong sign
    boom = AnalyticEnergy(lambda x: np.zeros(len(x)), lambda x: 1e3 * x, 0.1, 2)
    cfg = AldConfig([1.0, 0.5], steps_per_level=50, step_size_base=1.0)
    with pytest.raises(NumericError) as info:
        sample_ald(boom, cfg, 4, init_bounds=[[1, 2], [1, 2]])
    assert info.value.node == "level0"


def test_ald_rejects_generators_and_empty_requests():
    gen = identity_generator()
    with pytest.raises(ModelKindError):
        sample_ald(gen, AldConfig([0.5]), 10)
    with pytest.raises(TypeError):
        sample_ald(gen, AldConfig([0.5]), 10)
    oracle = gaussian_energy([0.0, 0.0], 1.0, 0.5)
    with pytest.raises(ContractError):
        sample_ald(oracle, AldConfig([0.5]), 0)


def test_ald_default_bounds_need_moments():
    cfg = MlpConfig(2, 1, 1, 4)
    dde = DdeModel(MlpParams(cfg, np.zeros(param_count(cfg))), 0.1)
    with pytest.raises(ConfigError):
        sample_ald(dde, AldConfig([0.1], steps_per_level=1), 5)
    dde.data_mean, dde.data_cov = np.zeros(2), np.eye(2)
    x, _ = sample_ald(dde, AldConfig([0.1], steps_per_level=1, step_size_base=0.0), 2000)
    assert np.all(np.abs(x) <= 3.0)


@pytest.mark.parametrize("levels", [[], [0.5, 0.5], [0.1, 0.5], [1.0, -0.1]])
def test_ald_config_validation(levels):
    with pytest.raises(ConfigError):
        AldConfig(levels)


def test_default_levels_are_geometric():
    lv = default_levels(0.1)
    assert len(lv) == 10 and lv[0] == pytest.approx(1.0) and lv[-1] == pytest.approx(0.1)
    ratios = np.array(lv[1:]) / np.array(lv[:-1])
    np.testing.assert_allclose(ratios, ratios[0])
    assert default_levels(2.0) == [2.0]


def test_binary_samples_roundtrip(tmp_path):
    x = np.random.default_rng(0).normal(size=(17, 3))
    path = tmp_path / "s.bin"
    save_samples_bin(x, path)
    raw = path.read_bytes()
    assert len(raw) == 8 + 17 * 3 * 8
    assert int.from_bytes(raw[:8], "little") == 17
    assert np.array_equal(load_samples_bin(path), x)


def test_binary_samples_errors(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x01\x00")
    with pytest.raises(ParseError):
        load_samples_bin(path)
    path.write_bytes((3).to_bytes(8, "little") + b"\x00" * 16)
    with pytest.raises(ParseError):
        load_samples_bin(path)
