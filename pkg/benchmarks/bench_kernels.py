"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Shapes match what the engine passes per call: one (8, 4) latent per step,
plus a batched (5000, 8, 4) case like the moment check uses.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from fldm import _kernels_py

try:
    from fldm import _kernels as compiled
except ImportError:  # extension not built
    compiled = None


def cases(rng):
    small = rng.standard_normal((8, 4)), rng.standard_normal((8, 4))
    big = rng.standard_normal((5000, 8, 4)), rng.standard_normal((5000, 8, 4))
    feats = rng.standard_normal((8, 16))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    return [
        ("ddim_step (8,4)", "ddim_step", (*small, 0.6, 0.61)),
        ("ddim_invert (8,4)", "ddim_invert", (*small, 0.6, 0.61)),
        ("fuse (8,4)", "fuse", (*small, 0.5)),
        ("cfg (8,4)", "cfg", (*small, 12.5)),
        ("mean_pairwise_cosine (8,16)", "mean_pairwise_cosine", (feats,)),
        ("ddim_step (5000,8,4)", "ddim_step", (*big, 0.6, 0.61)),
        ("fuse (5000,8,4)", "fuse", (*big, 0.5)),
    ]


def best_of(fn, args, repeat):
    n, _ = timeit.Timer(lambda: fn(*args)).autorange()
    return min(timeit.repeat(lambda: fn(*args), number=n, repeat=repeat)) / n


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'python us':>11s} {'cython us':>11s} {'speedup':>8s}")
    for label, name, a in cases(rng):
        py = best_of(getattr(_kernels_py, name), a, args.repeat) * 1e6
        if compiled is None:
            print(f"{label:32s} {py:11.2f} {'n/a':>11s} {'':>8s}")
            continue
        cy = best_of(getattr(compiled, name), a, args.repeat) * 1e6
        print(f"{label:32s} {py:11.2f} {cy:11.2f} {py / cy:7.2f}x")


if __name__ == "__main__":
    main()
