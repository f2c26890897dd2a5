"""Numba vs pure-numpy kernels, plus one short end-to-end training run per backend.

    python benchmarks/bench_kernels.py            # default sizes
    python benchmarks/bench_kernels.py --repeat 3 --no-train

Kernel timings call both implementations in-process. The training comparison
runs a subprocess per backend because the backend is picked at import time
from VITALNET_NUMBA.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import tempfile
import timeit

import numpy as np

from vitalnet import _kernels as K

TRAIN_SNIPPET = """
import sys, time
from vitalnet import harness as Hn
cfg = Hn.ExperimentConfig(dataset=sys.argv[1], out=sys.argv[2], epochs=int(sys.argv[3])).validate()
prep = Hn.prepare(cfg)
Hn.train(cfg.replace(epochs=1), prep)  # warm-up (numba compile)
t = time.perf_counter()
Hn.train(cfg, prep)
print(time.perf_counter() - t)
"""


def kernel_cases(rng):
    x = rng.uniform(size=(32, 8, 32, 32))
    cols = K.im2col_numpy(x, 3, 3, 1, 1)
    table = rng.normal(size=(4096, 64))
    lengths = rng.integers(5, 40, 256)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    idx = rng.integers(0, 4096, offsets[-1])
    grad = rng.normal(size=(256, 64))
    return {
        "im2col 32x8x32x32 k3": (0, (x, 3, 3, 1, 1)),
        "col2im 32x8x32x32 k3": (1, (cols, x.shape, 3, 3, 1, 1)),
        "bag_mean 256 bags": (2, (table, idx, offsets)),
        "bag_mean_grad 256 bags": (3, (grad, idx, offsets, 4096)),
    }


def bench_kernels(repeat: int, number: int) -> None:
    cases = kernel_cases(np.random.default_rng(0))
    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max |diff|':>12}")
    for name, (slot, args) in cases.items():
        fn_np, fn_nb = K.BACKENDS["numpy"][slot], K.BACKENDS["numba"][slot]
        diff = float(np.abs(fn_np(*args) - fn_nb(*args)).max())  # also triggers compilation
        t_np = min(timeit.repeat(lambda: fn_np(*args), repeat=repeat, number=number)) / number * 1e3
        t_nb = min(timeit.repeat(lambda: fn_nb(*args), repeat=repeat, number=number)) / number * 1e3
        print(f"{name:<26}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.1f}x{diff:>12.1e}")


def bench_training(epochs: int) -> None:
    from vitalnet import harness as Hn

    with tempfile.TemporaryDirectory() as tmp:
        ds = os.path.join(tmp, "ds")
        Hn.cmd_generate(Hn.ExperimentConfig(dataset=ds).validate())
        times = {}
        for backend, flag in (("numpy", "0"), ("numba", "1")):
            env = dict(os.environ, VITALNET_NUMBA=flag)
            out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET, ds, os.path.join(tmp, backend), str(epochs)],
                                 env=env, check=True, capture_output=True, text=True)
            times[backend] = float(out.stdout.strip().splitlines()[-1])
    print(f"\ntraining, default config, {epochs} epochs: numpy {times['numpy']:.2f}s  "
          f"numba {times['numba']:.2f}s  ({times['numpy'] / times['numba']:.2f}x)")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--number", type=int, default=10)
    p.add_argument("--epochs", type=int, default=5, help="epochs for the end-to-end comparison")
    p.add_argument("--no-train", action="store_true", help="skip the end-to-end comparison")
    args = p.parse_args()
    if not K.NUMBA_AVAILABLE:
        sys.exit("numba is not installed; nothing to compare")
    bench_kernels(args.repeat, args.number)
    if not args.no_train:
        bench_training(args.epochs)


if __name__ == "__main__":
    main()
