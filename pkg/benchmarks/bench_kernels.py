"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes follow the default desk-scale run: 12 participants per round, a
20-100-10 MLP (d = 3110), 50 examples per client. Also times one full
500-round run under each path in a subprocess, since the kernel choice is
fixed at import time.
"""

import argparse
import os
import subprocess
import sys
import time
import timeit

import numpy as np

from flpoison import _kernels as K

RUN_SNIPPET = (
    "import time; from flpoison.simulator import SimConfig, run; "
    "t = time.perf_counter(); run(SimConfig(attack='poisonedfl', defense='median')); "
    "print(time.perf_counter() - t)"
)


def _best(fn, repeat):
    fn()  # warm-up, and numba compile on first call
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases():
    rng = np.random.default_rng(0)
    sizes = [20, 100, 10]
    d = 20 * 100 + 100 + 100 * 10 + 10
    X = rng.normal(size=(12, d))
    a, b = rng.normal(size=d), rng.normal(size=d)
    feats, labels = rng.normal(size=(50, 20)), rng.integers(0, 10, 50)
    orders = rng.permutation(50)[None, :]
    w0 = rng.normal(size=d) * 0.1
    sizes_arr = np.array(sizes, dtype=np.int64)
    return [
        ("median 12x3110", lambda: K.median_columns_np(X), lambda: K.median_columns_nb(X)),
        ("trimmed mean 12x3110", lambda: K.trimmed_mean_columns_np(X, 2),
         lambda: K.trimmed_mean_columns_nb(X, 2)),
        ("pairwise sq dists 12x3110", lambda: K.pairwise_sq_dists_np(X),
         lambda: K.pairwise_sq_dists_nb(X)),
        ("count flips 3110", lambda: K.count_flips_np(a, b), lambda: K.count_flips_nb(a, b)),
        ("local SGD epoch (50 ex, batch 32)",
         lambda: K.sgd_epochs_np(w0.copy(), sizes, feats, labels, orders, 0.05, 32),
         lambda: K.sgd_epochs_nb(w0.copy(), sizes_arr, feats, labels, orders, 0.05, 32)),
    ]


def full_run(disable_numba: bool) -> float:
    env = dict(os.environ, FLPOISON_DISABLE_NUMBA="1" if disable_numba else "0")
    out = subprocess.run([sys.executable, "-c", RUN_SNIPPET], env=env, check=True,
                         capture_output=True, text=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-run", action="store_true", help="only time the kernels")
    args = ap.parse_args(argv)
    if K.numba is None:
        sys.exit("numba is not installed; nothing to compare")
    print(f"{'kernel':36s} {'numpy':>11s} {'numba':>11s} {'speedup':>8s}")
    for name, f_np, f_nb in kernel_cases():
        t_np, t_nb = _best(f_np, args.repeat), _best(f_nb, args.repeat)
        print(f"{name:36s} {t_np * 1e6:9.1f}us {t_nb * 1e6:9.1f}us {t_np / t_nb:7.1f}x")
    if not args.skip_run:
        t_np, t_nb = full_run(True), full_run(False)
        print(f"{'500-round poisonedfl/median run':36s} {t_np:10.1f}s {t_nb:10.1f}s "
              f"{t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
