"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run from the repository root::

    python3 benchmarks/bench_kernels.py

Timings use the best of several repeats after a warmup call (the warmup
also absorbs numba's JIT compilation).  Set ``KKTGEN_DISABLE_NUMBA=1``
to confirm the numpy-only path works; the script then only reports it.
"""

import time

import numpy as np

from kktgen import kernels


def best_of(fn, repeats=7):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def bench_adam(n=200_000, steps=20):
    rng = np.random.default_rng(0)
    grads = rng.standard_normal(n)

    def run(impl):
        values = np.ones(n)
        m = np.zeros(n)
        v = np.zeros(n)
        def body():
            for t in range(1, steps + 1):
                impl(values, grads, m, v, float(t), 1e-3, 0.9, 0.999, 1e-8)
        return body, lambda: values

    body_np, out_np = run(kernels._adam_update_np)
    body_np()  # warmup
    t_np = best_of(body_np)
    row = ["adam_update", f"{n} params x {steps} steps", t_np, None, None]
    if kernels.USE_NUMBA:
        body_nb, out_nb = run(kernels._adam_update_nb)
        body_nb()
        t_nb = best_of(body_nb)
        assert np.allclose(out_np()[:100], out_nb()[:100], rtol=1e-12)
        row[3] = t_nb
        row[4] = t_np / t_nb
    return row


def bench_tv(batch=256, side=32):
    rng = np.random.default_rng(1)
    images = rng.random((batch, side, side))
    kernels._tv_batch_np(images)
    t_np = best_of(lambda: kernels._tv_batch_np(images))
    row = ["tv_batch", f"{batch} x {side}x{side}", t_np, None, None]
    if kernels.USE_NUMBA:
        kernels._tv_batch_nb(images)
        t_nb = best_of(lambda: kernels._tv_batch_nb(images))
        assert abs(kernels._tv_batch_np(images)
                   - kernels._tv_batch_nb(images)) < 1e-9
        row[3] = t_nb
        row[4] = t_np / t_nb
    return row


def bench_ssim(side=32, window=8):
    rng = np.random.default_rng(2)
    a = rng.random((side, side))
    b = rng.random((side, side))
    c1, c2 = 1e-4, 9e-4
    kernels._ssim_uniform_np(a, b, window, c1, c2)
    t_np = best_of(lambda: kernels._ssim_uniform_np(a, b, window, c1, c2))
    row = ["ssim_uniform", f"{side}x{side}, window {window}", t_np, None,
           None]
    if kernels.USE_NUMBA:
        kernels._ssim_uniform_nb(a, b, window, c1, c2)
        t_nb = best_of(lambda: kernels._ssim_uniform_nb(a, b, window, c1,
                                                        c2))
        assert abs(kernels._ssim_uniform_np(a, b, window, c1, c2)
                   - kernels._ssim_uniform_nb(a, b, window, c1, c2)) < 1e-9
        row[3] = t_nb
        row[4] = t_np / t_nb
    return row


def main():
    mode = "numba" if kernels.USE_NUMBA else "numpy only"
    print(f"kernel backend: {mode}")
    header = f"{'kernel':<14} {'workload':<24} {'numpy':>10} " \
             f"{'numba':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for row in (bench_adam(), bench_tv(), bench_ssim()):
        name, workload, t_np, t_nb, speedup = row
        nb = f"{t_nb * 1e3:9.2f}ms" if t_nb is not None else "      n/a"
        sp = f"{speedup:7.1f}x" if speedup is not None else "     n/a"
        print(f"{name:<14} {workload:<24} {t_np * 1e3:9.2f}ms {nb} {sp}")


if __name__ == "__main__":
    main()
