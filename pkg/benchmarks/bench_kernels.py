"""Time the numba and numpy resampling kernels against each other.

    python3 benchmarks/bench_kernels.py [--repeats 20]

Reports the median wall time per call for a 256x256x3 augmentation warp and
a 2000x1000 -> 256x256 preprocessing resize.  The benchmark competes for the
CPU with the training process, so run it on an idle machine.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from dentage import _kernels as K
from dentage.augment import AugmentationSample, inverse_matrix


def bench(fn, repeats):
    fn()  # warm-up (includes JIT compilation for numba)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    img = rng.random((256, 256, 3), dtype=np.float32)
    raw = rng.random((2000, 1000, 3), dtype=np.float32)
    m = inverse_matrix(AugmentationSample(rotation=3.0, zoom=1.1, shift_h=7.0, shift_v=-4.0), 256, 256)
    backends = ["numpy"] + (["numba"] if K.warp_affine_numba is not None else [])
    cases = {
        "warp 256x256x3": lambda fn: fn(img, m, 256, 256, K.FILL_CONSTANT, 0.0),
        "resize 2000x1000 -> 256x256": lambda fn: fn(raw, K.resize_matrix(2000, 1000, 256, 256), 256, 256,
                                                    K.FILL_NEAREST, 0.0),
    }
    print(f"{'case':<30}" + "".join(f"{b:>12}" for b in backends) + ("   speedup" if len(backends) == 2 else ""))
    for name, call in cases.items():
        row = [bench(lambda fn=K._pick(b): call(fn), args.repeats) for b in backends]
        line = f"{name:<30}" + "".join(f"{t * 1e3:>10.2f}ms" for t in row)
        if len(row) == 2:
            line += f"   {row[0] / row[1]:>6.1f}x"
        print(line)
    if len(backends) == 1:
        print("numba unavailable or disabled (DENTAGE_DISABLE_NUMBA); numpy only")


if __name__ == "__main__":
    main()
