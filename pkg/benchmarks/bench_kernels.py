"""Compare the numba and numpy variants of the hot kernels.

Run with ``python benchmarks/bench_kernels.py [--n 20000] [--repeat 20]``.
Both variants are called directly so the ``DVF_NUMBA`` flag does not matter
here; results are checked for agreement before timing.
"""
import argparse
import time

import numpy as np

from dvf import graph as G
from dvf import kernels


def best_time(fn, repeat):
    fn()  # warm-up, includes compilation for the numba variant
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n, k, seed):
    rng = np.random.default_rng(seed)
    g = G.erdos_renyi(n, 4.0, rng)
    op = G.build_diffusion(g, 0.9)
    x = rng.normal(size=(n, k))
    seg = rng.integers(0, n // 4, size=4 * n)
    vals = rng.normal(size=(4 * n, k))
    ip, ix, dt = op.indptr, op.indices, op.data
    return {
        "csc_matmat": (lambda: kernels.csc_matmat_numba(ip, ix, dt, x, n),
                       lambda: kernels.csc_matmat_numpy(ip, ix, dt, x, n)),
        "csr_matmat": (lambda: kernels.csr_matmat_numba(ip, ix, dt, x),
                       lambda: kernels.csr_matmat_numpy(ip, ix, dt, x)),
        "segment_sum": (lambda: kernels.segment_sum_numba(vals, seg, n // 4),
                        lambda: kernels.segment_sum_numpy(vals, seg, n // 4)),
        "local_partial_sums": (lambda: kernels.local_partial_sums_numba(3, 0.5, 2_000_000),
                               lambda: kernels.local_partial_sums_numpy(3, 0.5, 2_000_000)),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n", type=int, default=20000)
    parser.add_argument("--k", type=int, default=32, help="columns of the dense operand")
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    print(f"{'kernel':<20}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for name, (fast, slow) in cases(args.n, args.k, args.seed).items():
        a, b = fast(), slow()
        if not np.allclose(a, b, rtol=1e-9, atol=1e-12):
            raise SystemExit(f"{name}: variants disagree")
        t_nb = best_time(fast, args.repeat)
        t_np = best_time(slow, args.repeat)
        print(f"{name:<20}{1e3 * t_nb:>12.3f}{1e3 * t_np:>12.3f}{t_np / t_nb:>10.2f}")


if __name__ == "__main__":
    main()
