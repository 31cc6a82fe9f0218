"""Command-line runner: ``ddegen {gen-data,train-dde,train-gen,sample,eval}``.

Run configs are JSON documents. Relative paths inside a config resolve
against the config file's directory; ``--out`` on the command line resolves
against the working directory. Every command writes ``run_manifest.json``
listing the files it produced. Exit status is 0 on success, 2 for
configuration or input errors and 3 for runtime or numeric failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import datasets as ds_mod
from .datasets import MixtureSpec, grid_means, load_csv, make_synthetic, save_csv, save_dataset
from .dde import DdeTrainConfig, NoiseSchedule, dde_from_checkpoint, load_dde, save_dde, train_dde
from .diffengine import kernels
from .errors import ConfigError, DdeError, ModelKindError
from .evaluation import avg_log_likelihood, density_grid, estimate_log_partition, mode_coverage
from .generator import (GaussianTarget, GenTrainConfig, GeneratorModel, load_gen_state, save_gen_state,
                        train_generator)
from .network import MlpConfig, count_evaluations, load_checkpoint
from .samplers import AldConfig, default_levels, sample_ald, sample_direct, save_samples_bin

log = logging.getLogger("ddegen")

LOGZ_VARIANCE_WARN = 0.5
EVAL_TASKS = ("grid", "logz", "ll", "modes")
NET_KEYS = {"layers", "channels", "residual", "activation"}

# Top-level keys of the eval report and the types their values must have.
REPORT_SCHEMA = {
    "checkpoint": str,
    "kind": str,
    "tasks": list,
    "warnings": list,
}
REPORT_SECTIONS = {
    "grid": {"csv": str, "ppm": str, "bounds": list, "resolution": list, "total_variation": float},
    "logz": {"log_z": float, "repeats": int, "samples_per_repeat": int, "variance": float,
             "variance_of_mean": float, "estimates": list},
    "ll": {"avg_log_likelihood": float, "n": int, "standardized": bool, "log_jacobian": float,
           "avg_log_likelihood_data_units": float},
    "modes": {"modes_hit": int, "total_modes": int, "histogram": list, "reverse_kl": float,
              "unassigned_fraction": float, "n_samples": int, "mean_modes_hit_per_batch": float},
}


def _is_type(val, typ) -> bool:
    if typ is bool:
        return isinstance(val, bool)
    if isinstance(val, bool):
        return False
    if typ is float:
        return isinstance(val, (int, float))
    return isinstance(val, typ)


def validate_report(report: dict) -> None:
    """Raise ConfigError unless ``report`` follows the documented eval schema."""
    problems = []
    for key, typ in REPORT_SCHEMA.items():
        if not isinstance(report.get(key), typ):
            problems.append(f"{key}: expected {typ.__name__}")
    for task in report.get("tasks", []):
        if task not in REPORT_SECTIONS:
            problems.append(f"unknown task {task!r}")
            continue
        section = report.get(task)
        if not isinstance(section, dict):
            problems.append(f"{task}: missing section")
            continue
        for key, typ in REPORT_SECTIONS[task].items():
            if not _is_type(section.get(key), typ):
                problems.append(f"{task}.{key}: expected {typ.__name__}")
    extra = set(report) - set(REPORT_SCHEMA) - set(REPORT_SECTIONS)
    if extra:
        problems.append(f"unexpected keys {sorted(extra)}")
    if problems:
        raise ConfigError("invalid report: " + "; ".join(problems))


# -- run configuration -------------------------------------------------------

@dataclass
class RunConfig:
    base_dir: Path = field(default_factory=Path.cwd)
    seed: int = 0
    out: str = "run"
    threads: int | None = None
    dataset: dict | None = None
    test_dataset: dict | None = None
    network: dict = field(default_factory=dict)
    dde: dict = field(default_factory=dict)
    checkpoint_every: int = 1000
    p_dde: str | None = None
    generator_network: dict = field(default_factory=dict)
    q_network: dict = field(default_factory=dict)
    generator: dict = field(default_factory=dict)
    target: dict | None = None
    ald: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def dde_config(self) -> DdeTrainConfig:
        return DdeTrainConfig.from_dict({**self.dde, "seed": self.seed})

    def gen_config(self) -> GenTrainConfig:
        return GenTrainConfig.from_dict({**self.generator, "seed": self.seed})

    def ald_config(self, sigma_eta: float) -> AldConfig:
        d = dict(self.ald)
        d.setdefault("sigma_levels", default_levels(sigma_eta))
        return AldConfig.from_dict({**d, "seed": self.seed})


EVAL_KEYS = {"tasks", "bounds", "resolution", "n_per", "repeats", "diagonal", "samples", "batch",
             "radius_sigmas", "mixture"}
TARGET_KEYS = {"gaussian": {"type", "mean", "cov"}, "mixture": {"type", "k_side", "spacing", "std"}}


def _net(section: dict, in_dim: int, out_dim: int) -> MlpConfig:
    unknown = set(section) - NET_KEYS
    if unknown:
        raise ConfigError(f"unknown network keys: {sorted(unknown)}")
    return MlpConfig(in_dim, out_dim, **section)


def _check_dataset(sel, label: str) -> list:
    if sel is None:
        return []
    if not isinstance(sel, dict):
        return [f"{label}: must be an object"]
    if "path" in sel:
        unknown = set(sel) - {"path", "standardize"}
        return [f"{label}: unknown keys {sorted(unknown)}"] if unknown else []
    if "name" not in sel:
        return [f"{label}: needs either 'name' or 'path'"]
    if sel["name"] not in ds_mod.SYNTHETIC:
        return [f"{label}: unknown dataset {sel['name']!r}"]
    unknown = set(sel) - {"name", "n", "seed", "params"}
    errs = [f"{label}: unknown keys {sorted(unknown)}"] if unknown else []
    if not isinstance(sel.get("n", 1), int) or sel.get("n", 1) < 1:
        errs.append(f"{label}: n must be a positive integer")
    return errs


def load_run_config(path=None, seed: int | None = None) -> RunConfig:
    """Parse and validate a run config, reporting every problem at once."""
    doc, base = {}, Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        base = path.resolve().parent
    names = {f.name for f in fields(RunConfig)} - {"base_dir"}
    errors = [f"unknown config key {k!r}" for k in sorted(set(doc) - names)]
    cfg = RunConfig(base_dir=base, **{k: v for k, v in doc.items() if k in names})
    if seed is not None:
        cfg.seed = seed
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        errors.append("seed must be a non-negative integer")
    errors += _check_dataset(cfg.dataset, "dataset") + _check_dataset(cfg.test_dataset, "test_dataset")
    checks = [
        ("network", lambda: _net(cfg.network, 2, 1)),
        ("generator_network", lambda: _net(cfg.generator_network, 2, 2)),
        ("q_network", lambda: _net(cfg.q_network, 2, 1)),
        ("dde", cfg.dde_config),
        ("generator", cfg.gen_config),
        ("ald", lambda: cfg.ald_config(0.1)),
    ]
    for label, check in checks:
        try:
            check()
        except (ConfigError, TypeError, ValueError) as exc:
            errors.append(f"{label}: {exc}")
    if not isinstance(cfg.checkpoint_every, int) or cfg.checkpoint_every < 1:
        errors.append("checkpoint_every must be a positive integer")
    if cfg.target is not None:
        kind = cfg.target.get("type") if isinstance(cfg.target, dict) else None
        if kind not in TARGET_KEYS:
            errors.append("target.type must be 'gaussian' or 'mixture'")
        elif set(cfg.target) - TARGET_KEYS[kind]:
            errors.append(f"target: unknown keys {sorted(set(cfg.target) - TARGET_KEYS[kind])}")
    unknown = set(cfg.eval) - EVAL_KEYS
    if unknown:
        errors.append(f"eval: unknown keys {sorted(unknown)}")
    if cfg.threads is not None and (not isinstance(cfg.threads, int) or cfg.threads < 1):
        errors.append("threads must be a positive integer")
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    return cfg


def _dataset(cfg: RunConfig, sel: dict, default_seed: int):
    if "path" in sel:
        return load_csv(cfg.path(sel["path"]), standardize=bool(sel.get("standardize", False)))
    return make_synthetic(sel["name"], sel.get("n", 10000), sel.get("seed", default_seed),
                          **sel.get("params", {}))


def _target(cfg: RunConfig):
    t = cfg.target
    if t is None:
        return None
    if t["type"] == "gaussian":
        return GaussianTarget(t["mean"], t.get("cov", 1.0))
    return MixtureSpec(grid_means(t.get("k_side", 5), t.get("spacing", 2.0)), t.get("std", 0.1))


# -- output helpers ----------------------------------------------------------

class Outputs:
    """Tracks written files and emits ``run_manifest.json``."""

    def __init__(self, out_dir, command: str):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.dir / name

    def finish(self, extra: dict | None = None) -> None:
        doc = {"command": self.command, "files": sorted(self.files), **(extra or {})}
        with open(self.dir / "run_manifest.json", "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")


def _write_trace(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (int, np.integer)) else format(float(v), ".17g") for v in row])


def _read_trace(path, n_int: int = 1) -> list:
    if not Path(path).exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [tuple(int(v) if i < n_int else float(v) for i, v in enumerate(r)) for r in rows]


def _write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(args.out) if args.out else cfg.path(cfg.out)


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    seed = 0 if args.seed is None else args.seed
    ds = make_synthetic(args.name, args.n, seed)
    out = Outputs(args.out or ".", "gen-data")
    save_dataset(ds, out.path(f"{args.name}.csv"), out.path(f"{args.name}.manifest.json"))
    out.finish({"seed": seed})
    return 0


def _run_fingerprint(cfg: RunConfig, net: MlpConfig, train: DdeTrainConfig) -> dict:
    return {"network": net.to_dict(), "train": train.to_dict(), "dataset": cfg.dataset}


def cmd_train_dde(args) -> int:
    cfg = _config(args)
    if cfg.dataset is None:
        raise ConfigError("train-dde needs a 'dataset' section")
    train = cfg.dde_config()
    data = _dataset(cfg, cfg.dataset, cfg.seed)
    net = _net(cfg.network, data.dim, 1)
    out = Outputs(_out_dir(args, cfg), "train-dde")
    ckpt_path, trace_path = out.path("dde.json"), out.path("dde_trace.csv")
    fingerprint = json.loads(json.dumps(_run_fingerprint(cfg, net, train)))
    state = None
    if args.resume and ckpt_path.exists():
        ck = load_checkpoint(ckpt_path)
        if ck.meta.get("run") != fingerprint:
            raise ConfigError(f"{ckpt_path} was produced by a different configuration; cannot resume")
        _, state = dde_from_checkpoint(ck)
        if state is None:
            raise ConfigError(f"{ckpt_path} has no optimizer state; cannot resume")
        state.trace = [r for r in _read_trace(trace_path) if r[0] < state.step]
        log.info("resuming DDE training at step %d", state.step)
    extra = {"run": fingerprint, "dataset": data.manifest()}
    schedule = NoiseSchedule(train)

    def save(st):
        st.model.sigma_eta = schedule.sigma_at(max(st.step - 1, 0))
        save_dde(ckpt_path, st.model, st, extra)
        _write_trace(trace_path, ["step", "sigma", "loss", "lr"], st.trace)

    def callback(st):
        if st.step % cfg.checkpoint_every == 0:
            save(st)

    model, state = train_dde(data, net, train, state=state, stop_at=args.stop_at, callback=callback)
    save(state)
    out.finish({"seed": cfg.seed, "step": state.step, "steps": train.steps})
    return 0


def cmd_train_gen(args) -> int:
    cfg = _config(args)
    p_path = Path(args.p_dde) if args.p_dde else (cfg.path(cfg.p_dde) if cfg.p_dde else None)
    if p_path is None:
        raise ConfigError("train-gen needs a data DDE checkpoint (--p-dde or 'p_dde' in the config)")
    gcfg = cfg.gen_config()
    p_dde, _ = load_dde(p_path)
    if not math.isclose(p_dde.sigma_eta, gcfg.sigma_eta, rel_tol=1e-12):
        raise ConfigError(f"generator sigma_eta {gcfg.sigma_eta} does not match the checkpoint's "
                          f"{p_dde.sigma_eta} ({p_path})")
    gen_net = _net(cfg.generator_network, gcfg.latent_dim, p_dde.dim)
    q_net = _net(cfg.q_network, p_dde.dim, 1)
    out = Outputs(_out_dir(args, cfg), "train-gen")
    gen_path, q_path, trace_path = out.path("generator.json"), out.path("q_dde.json"), out.path("gen_trace.csv")
    fingerprint = json.loads(json.dumps({"generator_network": gen_net.to_dict(), "q_network": q_net.to_dict(),
                                         "train": gcfg.to_dict(), "target": cfg.target}))
    state = None
    if args.resume and gen_path.exists():
        if load_checkpoint(gen_path).meta.get("run") != fingerprint:
            raise ConfigError(f"{gen_path} was produced by a different configuration; cannot resume")
        state = load_gen_state(gen_path, q_path)
        state.trace = [r for r in _read_trace(trace_path) if r[0] <= state.step]
        log.info("resuming generator training at outer step %d", state.step)
    header = ["outer_step", "gen_loss", "q_dde_loss", "diagnostic_kl"]

    def save(st):
        save_gen_state(gen_path, q_path, st, {"run": fingerprint, "p_dde": str(p_path)})
        _write_trace(trace_path, header, st.trace)

    def callback(st):
        if st.step % gcfg.checkpoint_every == 0:
            save(st)

    _, state = train_generator(p_dde, gen_net, q_net, gcfg, target=_target(cfg), state=state,
                               stop_at=args.stop_at, callback=callback)
    save(state)
    out.finish({"seed": cfg.seed, "step": state.step, "outer_steps": gcfg.outer_steps})
    return 0


def _load_model(path):
    ck = load_checkpoint(path)
    if ck.kind == "dde":
        return ck, dde_from_checkpoint(ck)[0]
    if ck.kind == "generator":
        return ck, GeneratorModel(ck.params)
    raise ConfigError(f"{path}: unsupported checkpoint kind {ck.kind!r}")


def cmd_sample(args) -> int:
    cfg = _config(args)
    ck, model = _load_model(args.checkpoint)
    out = Outputs(_out_dir(args, cfg) if (args.out or args.config) else Path("."), "sample")
    extra = {"seed": cfg.seed, "mode": args.mode, "n": args.n, "checkpoint": str(args.checkpoint)}
    if args.mode == "direct":
        if not isinstance(model, GeneratorModel):
            raise ModelKindError("direct sampling needs a generator checkpoint; use --mode ald for a DDE")
        with count_evaluations() as counter:
            x = sample_direct(model, args.n, cfg.seed)
    else:
        if isinstance(model, GeneratorModel):
            raise ModelKindError("Langevin sampling needs a DDE checkpoint, got a generator")
        ald = cfg.ald_config(model.sigma_eta)
        with count_evaluations() as counter:
            x, diag = sample_ald(model, ald, args.n)
        _write_json(out.path("ald_diagnostics.json"), {"levels": diag, "dde_per_level": False,
                                                        "config": ald.to_dict()})
    extra["evaluations_per_sample"] = counter() / args.n
    if args.format == "bin":
        save_samples_bin(x, out.path("samples.bin"))
    else:
        save_csv(x, out.path("samples.csv"), header=[f"x{i}" for i in range(x.shape[1])])
    out.finish(extra)
    return 0


def _parse_tasks(text: str) -> list:
    tasks = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in tasks if t not in EVAL_TASKS]
    if bad or not tasks:
        raise ConfigError(f"unknown eval tasks {bad}; choose from {', '.join(EVAL_TASKS)}")
    if "ll" in tasks and "logz" not in tasks:
        raise ConfigError("task 'll' needs 'logz' in the same run (log-likelihood requires log Z)")
    return [t for t in EVAL_TASKS if t in tasks]


def cmd_eval(args) -> int:
    cfg = _config(args)
    ev = cfg.eval
    tasks = _parse_tasks(args.tasks or ",".join(ev.get("tasks", ["grid"])))
    ck, model = _load_model(args.checkpoint)
    is_dde = ck.kind == "dde"
    if not is_dde and set(tasks) & {"grid", "logz", "ll"}:
        raise ModelKindError("grid, logz and ll need a DDE checkpoint")
    out = Outputs(_out_dir(args, cfg) if (args.out or args.config) else Path("."), "eval")
    report = {"checkpoint": str(args.checkpoint), "kind": ck.kind, "tasks": tasks, "warnings": []}
    if "grid" in tasks:
        bounds = ev.get("bounds", [[-2.0, 2.0], [-2.0, 2.0]])
        res = ev.get("resolution", 100)
        grid = density_grid(model, bounds, res)
        grid.to_csv(out.path("grid.csv"))
        grid.to_ppm(out.path("grid.ppm"))
        report["grid"] = {"csv": "grid.csv", "ppm": "grid.ppm", "bounds": [list(b) for b in grid.bounds],
                          "resolution": list(grid.resolution), "total_variation": grid.total_variation()}
    if "logz" in tasks:
        est = estimate_log_partition(model, n_per=ev.get("n_per", 51200), repeats=ev.get("repeats", 5),
                                     seed=cfg.seed, diagonal=bool(ev.get("diagonal", False)))
        report["logz"] = est.to_dict()
        if est.variance > LOGZ_VARIANCE_WARN:
            msg = (f"log Z repeat variance {est.variance:.3g} exceeds {LOGZ_VARIANCE_WARN} nats; "
                   "log-likelihoods are unreliable")
            log.warning(msg)
            report["warnings"].append(msg)
        if "ll" in tasks:
            if cfg.test_dataset is None:
                raise ConfigError("task 'll' needs a 'test_dataset' section in the config")
            test = _dataset(cfg, cfg.test_dataset, cfg.seed + 1)
            pts, log_jac, standardized = test.points, 0.0, False
            st = ck.meta.get("dataset", {}).get("standardization")
            if st is not None:
                st = ds_mod.Standardization(np.asarray(st["mean"]), np.asarray(st["std"]))
                raw = test.standardization.invert(pts) if test.standardization is not None else pts
                pts, log_jac, standardized = st.apply(raw), st.log_jacobian, True
            ll = avg_log_likelihood(model, est, pts)
            report["ll"] = {"avg_log_likelihood": ll, "n": int(pts.shape[0]), "standardized": standardized,
                            "log_jacobian": log_jac, "avg_log_likelihood_data_units": ll + log_jac}
    if "modes" in tasks:
        report["modes"] = _eval_modes(cfg, ev, model, is_dde)
    validate_report(report)
    _write_json(out.path("report.json"), report)
    out.finish({"seed": cfg.seed})
    return 0


def _eval_modes(cfg: RunConfig, ev: dict, model, is_dde: bool) -> dict:
    mix = ev.get("mixture", {})
    unknown = set(mix) - {"k_side", "spacing", "std"}
    if unknown:
        raise ConfigError(f"eval.mixture: unknown keys {sorted(unknown)}")
    spec = MixtureSpec(grid_means(mix.get("k_side", 5), mix.get("spacing", 2.0)), mix.get("std", 0.1))
    n, batch = int(ev.get("samples", 10240)), int(ev.get("batch", 512))
    if is_dde:
        x, _ = sample_ald(model, cfg.ald_config(model.sigma_eta), n)
    else:
        x = sample_direct(model, n, cfg.seed)
    rep = mode_coverage(x, spec, ev.get("radius_sigmas", 3.0)).to_dict()
    hits = [mode_coverage(x[i:i + batch], spec).modes_hit for i in range(0, n - batch + 1, batch)]
    rep["mean_modes_hit_per_batch"] = float(np.mean(hits)) if hits else float(rep["modes_hit"])
    return rep


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="evaluation threads (default: $DDE_THREADS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ddegen", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset CSV and manifest")
    g.add_argument("name", help=", ".join(ds_mod.SYNTHETIC))
    g.add_argument("n", type=int)
    g.set_defaults(func=cmd_gen_data)
    for name, func, help_ in (("train-dde", cmd_train_dde, "train a density estimator"),
                              ("train-gen", cmd_train_gen, "train a generator against a data DDE")):
        t = sub.add_parser(name, parents=[common], help=help_)
        t.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output dir")
        t.add_argument("--stop-at", type=int, help="stop after this many (outer) steps")
        if name == "train-gen":
            t.add_argument("--p-dde", help="data DDE checkpoint (overrides the config)")
        t.set_defaults(func=func)
    s = sub.add_parser("sample", parents=[common], help="draw samples from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--mode", choices=("direct", "ald"), default="direct")
    s.add_argument("--format", choices=("csv", "bin"), default="csv")
    s.set_defaults(func=cmd_sample)
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--tasks", help="comma-separated subset of " + ",".join(EVAL_TASKS))
    e.set_defaults(func=cmd_eval)
    return p


def _threads(args, cfg: RunConfig | None = None) -> int:
    """--threads, then $DDE_THREADS, then the config's ``threads``, then 1."""
    if args.threads is not None:
        return args.threads
    env = os.environ.get("DDE_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"DDE_THREADS must be an integer, got {env!r}") from None
    if cfg is not None and cfg.threads is not None:
        return cfg.threads
    return 1


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config, args.seed)
    kernels.set_threads(_threads(args, cfg))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        kernels.set_threads(_threads(args))
        return args.func(args)
    except DdeError as exc:
        print(f"ddegen: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"ddegen: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
