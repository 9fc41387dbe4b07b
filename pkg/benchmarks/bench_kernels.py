"""Time the numba and numpy paths of each hot kernel.

    python benchmarks/bench_kernels.py [--repeat 5]

Both paths are called explicitly, so SCPCAP_DISABLE_NUMBA does not matter here.
The first numba call (compilation, or loading the cache) is excluded.
"""

import argparse
import time

import numpy as np

from scpcap import _kernels as K


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    lengths = rng.integers(5, 12, size=20000)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    tokens = rng.integers(0, 200, size=offsets[-1])
    yield "pair_codes (20k sentences, window 3)", \
        lambda nb: K.pair_codes(tokens, offsets, 3, 200, use_numba=nb)

    for b, k, d in ((32, 16, 64), (32, 4, 64), (2, 5, 8)):
        h = rng.normal(size=(b, k, d))
        w = rng.normal(size=(3, d, d))
        tags = rng.integers(-1, 3, size=(b, k, k))
        g = rng.normal(size=tags.shape)
        shape = f"(B={b}, k={k}, d={d})"
        yield f"tag_bilinear {shape}", lambda nb, h=h, w=w, t=tags: K.tag_bilinear(h, w, t, use_numba=nb)
        yield f"tag_bilinear_backward {shape}", \
            lambda nb, g=g, h=h, w=w, t=tags: K.tag_bilinear_backward(g, h, w, t, use_numba=nb)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'kernel':44s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)):
        fn(True)  # warm up
        t_np = best_of(lambda: fn(False), args.repeat)
        t_nb = best_of(lambda: fn(True), args.repeat)
        print(f"{name:44s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
