"""Time the numba-jitted kernels against the pure-numpy fallback.

Run:  python benchmarks/bench_kernels.py [--repeats N]

The shapes mirror the hot paths of a conv-extractor attack round: per-worker
half images, a handful of output channels, small batches, plus the TV stack.
The numba path is warmed before timing so compilation is excluded.
"""

import argparse
import time

import numpy as np

from cafe_lab.kernels import (_conv2d_fwd_loops, _conv2d_fwd_np,
                              _conv2d_igrad_loops, _conv2d_igrad_np,
                              _conv2d_wgrad_loops, _conv2d_wgrad_np,
                              _tv_grad_loops, _tv_grad_np, _tv_value_loops,
                              _tv_value_np)

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False
    print("numba unavailable: reporting the numpy path only")


def timer(fn, args, repeats):
    fn(*args)                       # warm-up (and JIT compile)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    x = rng.random((16, 8))            # one worker's slice of a 16x16 image
    w = rng.random((8, 3, 3))
    dy = rng.random((8, 14, 6))
    imgs = rng.random((16, 16, 16))

    cases = [
        ("conv2d_fwd", _conv2d_fwd_loops, _conv2d_fwd_np, (x, w, 1)),
        ("conv2d_igrad", _conv2d_igrad_loops, _conv2d_igrad_np,
         (dy, w, 1, 16, 8)),
        ("conv2d_wgrad", _conv2d_wgrad_loops, _conv2d_wgrad_np,
         (x, dy, 1, 3, 3)),
        ("tv_value", _tv_value_loops, _tv_value_np, (imgs,)),
        ("tv_grad", _tv_grad_loops, _tv_grad_np, (imgs,)),
    ]

    print(f"{'kernel':<14}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for name, loop_fn, np_fn, call in cases:
        t_np = timer(np_fn, call, args.repeats)
        if HAVE_NUMBA:
            jit_fn = njit(cache=True)(loop_fn)
            t_nb = timer(jit_fn, call, args.repeats)
            print(f"{name:<14}{t_np * 1e6:>10.1f}us{t_nb * 1e6:>10.1f}us"
                  f"{t_np / t_nb:>9.1f}x")
        else:
            print(f"{name:<14}{t_np * 1e6:>10.1f}us{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
