"""Compare the numba and numpy paths of the hot forward-pass kernels.

Run:  python3 benchmarks/bench_attention.py
The numba path needs the default NBL_NUMBA=1 (and numba installed); the
script times both implementations directly, checks they agree, and prints
a speedup table.
"""

import time

import numpy as np

from nbl import kernels

SIZES = [
    # batch, context, heads, groups, head_dim
    (8, 64, 4, 2, 16),
    (32, 128, 4, 2, 16),
    (128, 128, 8, 4, 16),
    (32, 256, 8, 2, 32),
]


def timeit(fn, *args, repeats=3):
    best = float("inf")
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main() -> None:
    if not kernels.HAVE_NUMBA:
        print("numba backend unavailable (NBL_NUMBA=0 or numba missing); "
              "timing the numpy path only")
    rng = np.random.Generator(np.random.PCG64(0))
    print(f"{'shape':30s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s} {'max|diff|':>10s}")
    for b, n, h, g, hd in SIZES:
        q = rng.standard_normal((b, n, h, hd))
        k = rng.standard_normal((b, n, g, hd))
        v = rng.standard_normal((b, n, g, hd))
        t_np, ref = timeit(kernels._causal_core_np, q, k, v)
        label = f"B={b} n={n} h={h} g={g} hd={hd}"
        if kernels.HAVE_NUMBA:
            kernels._causal_core_nb(q[:1], k[:1], v[:1])  # compile outside timing
            t_nb, got = timeit(kernels._causal_core_nb, q, k, v)
            diff = np.abs(got - ref).max()
            assert diff <= 1e-10, f"backend mismatch: {diff}"
            print(f"{label:30s} {t_np:9.4f}s {t_nb:9.4f}s {t_np / t_nb:7.2f}x {diff:10.2e}")
        else:
            print(f"{label:30s} {t_np:9.4f}s {'-':>10s} {'-':>8s} {'-':>10s}")

    u = rng.standard_normal((50_000, 256))
    t_np, ref = timeit(kernels._gelu_np, u)
    if kernels.HAVE_NUMBA:
        kernels._gelu_nb(u[:8])
        t_nb, got = timeit(kernels._gelu_nb, u)
        diff = np.abs(got - ref).max()
        assert diff <= 1e-12, f"gelu mismatch: {diff}"
        print(f"{'gelu 50000x256':30s} {t_np:9.4f}s {t_nb:9.4f}s {t_np / t_nb:7.2f}x {diff:10.2e}")
    else:
        print(f"{'gelu 50000x256':30s} {t_np:9.4f}s")


if __name__ == "__main__":
    main()
