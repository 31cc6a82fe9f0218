"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--batch 2048] [--layers 25] [--channels 32] [--repeats 5]

Times each kernel on both backends (best of ``--repeats``), checks that the
results agree, and prints a table with the speedup of the compiled core.
"""

import argparse
import time

import numpy as np

from ddegen.diffengine import kernels
from ddegen.network import MlpConfig, init_mlp


def best_time(fn, repeats):
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(layers, channels, batch, seed=0):
    rng = np.random.default_rng(seed)
    dde = MlpConfig(2, 1, layers, channels)
    gen = MlpConfig(2, 2, layers, channels)
    th_d, th_g = init_mlp(dde, 0).flat, init_mlp(gen, 1).flat
    x = rng.standard_normal((batch, 2))
    target = rng.standard_normal((batch, 2))
    ybar = rng.standard_normal((batch, 2))
    return {
        "forward": lambda: kernels.forward(dde, th_d, x),
        "value_and_input_grad": lambda: kernels.value_and_input_grad(dde, th_d, x),
        "dde_loss_and_grad": lambda: kernels.dde_loss_and_grad(dde, th_d, x, target),
        "generator_vjp": lambda: kernels.vjp(gen, th_g, x, ybar),
    }


def flatten(result):
    if isinstance(result, tuple):
        return np.concatenate([np.ravel(np.asarray(r, dtype=np.float64)) for r in result])
    return np.ravel(result)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=2048)
    ap.add_argument("--layers", type=int, default=25)
    ap.add_argument("--channels", type=int, default=32)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)

    if not kernels.native_available():
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
        return 1
    print(f"net {args.layers}x{args.channels}, batch {args.batch}, best of {args.repeats}")
    print(f"{'kernel':<22}{'numpy ms':>10}{'native ms':>11}{'speedup':>9}{'max rel diff':>14}")
    for name, fn in cases(args.layers, args.channels, args.batch).items():
        with kernels.backend("python"):
            t_py = best_time(fn, args.repeats)
            ref = flatten(fn())
        with kernels.backend("native"):
            t_nat = best_time(fn, args.repeats)
            out = flatten(fn())
        rel = np.max(np.abs(out - ref)) / max(np.max(np.abs(ref)), 1e-300)
        print(f"{name:<22}{t_py * 1e3:>10.2f}{t_nat * 1e3:>11.2f}{t_py / t_nat:>8.2f}x{rel:>14.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
