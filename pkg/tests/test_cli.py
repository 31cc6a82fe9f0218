import json
import subprocess
import sys
import time

import numpy as np
import pytest

from ddegen.cli import load_run_config, main, validate_report
from ddegen.diffengine import kernels
from ddegen.errors import ConfigError
from ddegen.network import load_checkpoint
from ddegen.samplers import load_samples_bin

SMALL_NET = {"layers": 2, "channels": 16}


def write_config(path, **doc):
    path.write_text(json.dumps(doc))
    return str(path)


def dde_config(tmp_path, steps=60, **extra):
    doc = dict(seed=1, out="dde_run", dataset={"name": "gaussian", "n": 2000}, network=SMALL_NET,
               dde={"steps": steps, "batch_size": 128, "lr": 2e-3, "sigma_start": 0.5, "sigma_end": 0.5},
               checkpoint_every=20, eval={"n_per": 2048, "repeats": 3, "resolution": 8})
    doc.update(extra)
    return write_config(tmp_path / "dde.json", **doc)


def manifest(d):
    return json.loads((d / "run_manifest.json").read_text())


@pytest.fixture(autouse=True)
def _reset_threads():
    yield
    kernels.set_threads(1)


# -- gen-data ----------------------------------------------------------------

def test_gen_data_writes_csv_and_manifest(tmp_path):
    assert main(["gen-data", "checkerboard", "10000", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "checkerboard.csv").read_text().splitlines()
    assert len(lines) == 10001
    doc = json.loads((tmp_path / "checkerboard.manifest.json").read_text())
    assert doc["dim"] == 2 and doc["n"] == 10000
    assert manifest(tmp_path)["files"] == ["checkerboard.csv", "checkerboard.manifest.json"]


def test_gen_data_is_byte_identical_per_seed(tmp_path):
    for d in ("a", "b"):
        assert main(["gen-data", "two_spirals", "500", "--seed", "3", "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "two_spirals.csv").read_bytes() == (tmp_path / "b" / "two_spirals.csv").read_bytes()


def test_unknown_dataset_exits_nonzero_with_message(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ddegen.cli", "gen-data", "moons", "10", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "unknown dataset" in proc.stderr
    assert not (tmp_path / "moons.csv").exists()


# -- config validation -------------------------------------------------------

def test_config_errors_are_enumerated_before_compute(tmp_path):
    path = write_config(tmp_path / "bad.json", dataset={"name": "gaussian", "bogus": 1},
                        dde={"sigma_start": -0.1, "sigma_end": -0.1}, network={"depth": 3}, colour="red",
                        target={"type": "gaussian", "scale": 2})
    with pytest.raises(ConfigError) as info:
        load_run_config(path)
    msg = str(info.value)
    for needle in ("colour", "bogus", "depth", "positive", "scale"):
        assert needle in msg
    assert main(["train-dde", "--config", path]) == 2
    assert not (tmp_path / "run").exists()


def test_invalid_json_and_missing_config(tmp_path):
    bad = tmp_path / "x.json"
    bad.write_text("{")
    assert main(["train-dde", "--config", str(bad)]) == 2
    assert main(["train-dde", "--config", str(tmp_path / "none.json")]) == 2


def test_paths_resolve_against_the_config_file(tmp_path):
    sub = tmp_path / "cfg"
    sub.mkdir()
    cfg = load_run_config(dde_config(sub))
    assert cfg.path(cfg.out) == sub / "dde_run"


# -- train-dde ---------------------------------------------------------------

def test_smoke_training_under_a_minute(tmp_path):
    path = write_config(tmp_path / "smoke.json", dataset={"name": "gaussian", "n": 10000},
                        dde={"steps": 500, "batch_size": 512, "lr": 1e-3, "sigma_start": 0.5, "sigma_end": 0.5},
                        checkpoint_every=500)
    t0 = time.perf_counter()
    assert main(["train-dde", "--config", path]) == 0
    assert time.perf_counter() - t0 < 60
    ck = load_checkpoint(tmp_path / "run" / "dde.json")
    assert ck.kind == "dde" and ck.meta["step"] == 500 and ck.params.config.layers == 25
    rows = (tmp_path / "run" / "dde_trace.csv").read_text().splitlines()
    assert rows[0] == "step,sigma,loss,lr" and len(rows) == 501


def test_resume_matches_uninterrupted_run(tmp_path):
    path = dde_config(tmp_path)
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(["train-dde", "--config", path, "--out", str(full)]) == 0
    assert main(["train-dde", "--config", path, "--out", str(part), "--stop-at", "30"]) == 0
    assert load_checkpoint(part / "dde.json").meta["step"] == 30
    assert main(["train-dde", "--config", path, "--out", str(part), "--resume"]) == 0
    assert (full / "dde.json").read_bytes() == (part / "dde.json").read_bytes()
    assert (full / "dde_trace.csv").read_bytes() == (part / "dde_trace.csv").read_bytes()


def test_resume_refuses_a_different_config(tmp_path):
    path = dde_config(tmp_path)
    out = str(tmp_path / "r")
    assert main(["train-dde", "--config", path, "--out", out, "--stop-at", "10"]) == 0
    assert main(["train-dde", "--config", path, "--out", out, "--resume", "--seed", "9"]) == 2


def test_rerun_is_bit_identical(tmp_path):
    path = dde_config(tmp_path, steps=20)
    for d in ("a", "b"):
        assert main(["train-dde", "--config", path, "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "dde.json").read_bytes() == (tmp_path / "b" / "dde.json").read_bytes()


def test_nonpositive_sigma_rejected(tmp_path):
    path = write_config(tmp_path / "s.json", dataset={"name": "gaussian"}, dde={"sigma_start": 0.0, "sigma_end": 0.0})
    assert main(["train-dde", "--config", path]) == 2


# -- train-gen, sample, eval -------------------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    path = dde_config(root, steps=200, generator_network=SMALL_NET, q_network=SMALL_NET, p_dde="dde_run/dde.json",
                      generator={"outer_steps": 20, "checkpoint_every": 5, "batch_size": 64, "q_init_steps": 10,
                                 "dde_inner_steps": 2, "sigma_eta": 0.5, "gen_lr": 1e-3, "dde_lr": 1e-3,
                                 "diagnostic_samples": 500},
                      target={"type": "gaussian", "mean": [0, 0], "cov": 1.0},
                      test_dataset={"name": "gaussian", "n": 500})
    assert main(["train-dde", "--config", path]) == 0
    assert main(["train-gen", "--config", path, "--out", str(root / "gen")]) == 0
    kernels.set_threads(1)
    return root, path


def test_train_gen_outputs(trained):
    root, _ = trained
    rows = (root / "gen" / "gen_trace.csv").read_text().splitlines()
    assert rows[0] == "outer_step,gen_loss,q_dde_loss,diagnostic_kl"
    assert [int(r.split(",")[0]) for r in rows[1:]] == [5, 10, 15, 20]
    assert manifest(root / "gen")["files"] == ["gen_trace.csv", "generator.json", "q_dde.json"]
    assert load_checkpoint(root / "gen" / "q_dde.json").kind == "dde"


def test_train_gen_resume_is_exact(trained, tmp_path):
    root, path = trained
    out = str(tmp_path / "g")
    assert main(["train-gen", "--config", path, "--out", out, "--stop-at", "7"]) == 0
    assert main(["train-gen", "--config", path, "--out", out, "--resume"]) == 0
    for name in ("generator.json", "q_dde.json", "gen_trace.csv"):
        assert (tmp_path / "g" / name).read_bytes() == (root / "gen" / name).read_bytes()


def test_train_gen_errors(trained, tmp_path):
    root, path = trained
    assert main(["train-gen", "--config", path, "--p-dde", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path)]) == 2
    doc = json.loads(open(path).read())
    doc["generator"]["sigma_eta"] = 0.2
    other = write_config(root / "mismatch.json", **doc)
    assert main(["train-gen", "--config", other, "--out", str(tmp_path / "m")]) == 2


def test_sample_direct_and_ald(trained, tmp_path):
    root, _ = trained
    assert main(["sample", str(root / "gen" / "generator.json"), "--n", "300", "--out", str(tmp_path / "d")]) == 0
    assert len((tmp_path / "d" / "samples.csv").read_text().splitlines()) == 301
    assert manifest(tmp_path / "d")["evaluations_per_sample"] == 1.0
    assert main(["sample", str(root / "dde_run" / "dde.json"), "--n", "50", "--mode", "ald", "--format", "bin",
                 "--out", str(tmp_path / "a")]) == 0
    assert load_samples_bin(tmp_path / "a" / "samples.bin").shape == (50, 2)
    diag = json.loads((tmp_path / "a" / "ald_diagnostics.json").read_text())
    assert len(diag["levels"]) == 10
    assert manifest(tmp_path / "a")["evaluations_per_sample"] == 10 * 100


def test_sample_kind_mismatch_is_a_type_error(trained, tmp_path):
    root, _ = trained
    assert main(["sample", str(root / "gen" / "generator.json"), "--mode", "ald", "--out", str(tmp_path)]) == 2
    assert main(["sample", str(root / "dde_run" / "dde.json"), "--out", str(tmp_path)]) == 2


def test_eval_grid_logz_ll(trained, tmp_path):
    root, path = trained
    out = tmp_path / "e"
    assert main(["eval", str(root / "dde_run" / "dde.json"), "--config", path, "--tasks", "grid,logz,ll",
                 "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    validate_report(report)
    assert report["tasks"] == ["grid", "logz", "ll"]
    assert (out / "grid.ppm").read_bytes().startswith(b"P6\n8 8\n255\n")
    assert len((out / "grid.csv").read_text().splitlines()) == 65
    assert np.isfinite(report["ll"]["avg_log_likelihood"])
    assert manifest(out)["files"] == ["grid.csv", "grid.ppm", "report.json"]


def test_eval_ll_requires_logz(trained, tmp_path):
    root, path = trained
    assert main(["eval", str(root / "dde_run" / "dde.json"), "--config", path, "--tasks", "ll",
                 "--out", str(tmp_path)]) == 2
    assert main(["eval", str(root / "dde_run" / "dde.json"), "--tasks", "grid,pdf", "--out", str(tmp_path)]) == 2


def test_eval_modes_on_generator(trained, tmp_path):
    root, path = trained
    assert main(["eval", str(root / "gen" / "generator.json"), "--config", path, "--tasks", "modes",
                 "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())["modes"]
    assert rep["total_modes"] == 25 and rep["n_samples"] == 10240


def test_report_schema_rejects_bad_documents():
    good = {"checkpoint": "c", "kind": "dde", "tasks": [], "warnings": []}
    validate_report(good)
    for bad in ({**good, "tasks": ["grid"]}, {**good, "kind": 3}, {**good, "extra": 1},
                {**good, "tasks": ["logz"], "logz": {"log_z": "1"}}):
        with pytest.raises(ConfigError):
            validate_report(bad)


# -- threads -----------------------------------------------------------------

def test_thread_settings_and_precedence(trained, tmp_path, monkeypatch):
    root, path = trained
    ck = str(root / "dde_run" / "dde.json")
    monkeypatch.setenv("DDE_THREADS", "3")
    assert main(["eval", ck, "--config", path, "--tasks", "logz", "--out", str(tmp_path / "t3")]) == 0
    assert kernels.get_threads() == 3
    assert main(["eval", ck, "--config", path, "--tasks", "logz", "--threads", "1", "--out", str(tmp_path / "t1")]) == 0
    assert kernels.get_threads() == 1
    # thread count never changes results
    assert (tmp_path / "t3" / "report.json").read_bytes() == (tmp_path / "t1" / "report.json").read_bytes()
    monkeypatch.setenv("DDE_THREADS", "lots")
    assert main(["eval", ck, "--config", path, "--tasks", "logz", "--out", str(tmp_path / "x")]) == 2
    monkeypatch.delenv("DDE_THREADS")
    assert main(["eval", ck, "--config", path, "--tasks", "logz", "--threads", "0", "--out", str(tmp_path / "x")]) == 2


def test_runtime_errors_exit_3(tmp_path):
    bad = tmp_path / "broken.json"
    bad.write_text("{}")
    # a file that parses as JSON but is not a checkpoint is an input error
    assert main(["sample", str(bad), "--out", str(tmp_path)]) == 2
    # an unreadable output location is a runtime error
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "gaussian", "10", "--out", str(blocker / "sub")]) == 3
