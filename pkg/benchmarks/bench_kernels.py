"""Compare the compiled and NumPy kernel backends.

Times each row-wise kernel on token-sized inputs (a few dozen rows of width
32, the shapes one sequence produces) and on a larger block, then one full
training step of the model. Run with ``python3 benchmarks/bench_kernels.py``.
"""

import argparse
import timeit

import numpy as np

from mmtrisk.cohort import Dataset, SynthConfig, generate_cohort
from mmtrisk.numcore import kernels
from mmtrisk.trainkit import TrainConfig, train


def kernel_cases(rows, width, rng):
    x = rng.normal(size=(rows, width))
    g = rng.normal(size=(rows, width))
    gain, bias = rng.normal(size=width), rng.normal(size=width)
    y = kernels.softmax_rows_fwd(x)
    _, xhat, rstd = kernels.layer_norm_fwd(x, gain, bias, 1e-5)
    ties = np.round(rng.normal(size=rows * width), 1)
    return {
        "softmax_fwd": lambda: kernels.softmax_rows_fwd(x),
        "softmax_bwd": lambda: kernels.softmax_rows_bwd(y, g),
        "layer_norm_fwd": lambda: kernels.layer_norm_fwd(x, gain, bias, 1e-5),
        "layer_norm_bwd": lambda: kernels.layer_norm_bwd(g, xhat, rstd, gain),
        "average_ranks": lambda: kernels.average_ranks(ties),
    }


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=2000)
    ap.add_argument("--no-train", action="store_true", help="skip the training-step timing")
    args = ap.parse_args()

    backends = sorted(kernels.BACKENDS)
    if "compiled" not in backends:
        print("compiled extension not built; timing the NumPy backend only")
    prev = kernels.BACKEND
    print(f"{'kernel':<16}{'shape':>10}" + "".join(f"{b + ' us':>14}" for b in backends))
    for rows, width in ((24, 32), (512, 64)):
        names = kernel_cases(rows, width, np.random.default_rng(0))
        for name in names:
            times = []
            for b in backends:
                kernels.use_backend(b)
                fn = kernel_cases(rows, width, np.random.default_rng(0))[name]
                times.append(best_of(fn, args.repeat, args.number) * 1e6)
            print(f"{name:<16}{f'{rows}x{width}':>10}" + "".join(f"{t:14.2f}" for t in times))

    if not args.no_train:
        data = Dataset(*generate_cohort(SynthConfig(n_patients=120, seed=0)))
        half = len(data) // 2
        tr, va = data.subset(range(half)), data.subset(range(half, len(data)))
        cfg = TrainConfig(lr=1e-3, epochs=1, batch_size=16, patience=0)
        for b in backends:
            kernels.use_backend(b)
            t = best_of(lambda: train(tr, va, cfg), 3, 1)
            print(f"one epoch, {half} sequences, {b}: {t:.2f} s")
    kernels.use_backend(prev)


if __name__ == "__main__":
    main()
