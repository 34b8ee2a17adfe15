"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel and size with the median wall time of each
backend and the speed-up. Both backends are checked to agree first.
"""

import argparse
import statistics
import time

import numpy as np

from factoradapt import kernels
from factoradapt.model import blank_augment


def _logp(rng, T, V):
    z = rng.standard_normal((T, V))
    return z - np.logaddexp.reduce(z, axis=1, keepdims=True)


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases(rng):
    for T, L in [(12, 4), (50, 10), (200, 40)]:
        logp = _logp(rng, T, 10)
        ext = blank_augment(list(rng.integers(1, 10, L)))
        yield f"ctc_alpha_beta T={T} L={L}", lambda impl, a=logp, e=ext: kernels.ctc_alpha_beta(a, e, impl=impl)
    for T in (12, 50, 200):
        logp = _logp(rng, T, 10)
        r_nb = np.full(T, -np.inf)
        r_b = np.cumsum(logp[:, 0])
        cands = np.arange(1, 10)
        yield f"ctc_prefix_extend T={T} C=9", lambda impl, a=logp, nb=r_nb, b=r_b, c=cands: kernels.ctc_prefix_extend(
            a, nb, b, -1, c, 0, impl=impl
        )
    for n in (8, 40, 200):
        a, b = rng.integers(0, 6, n), rng.integers(0, 6, n)
        yield f"edit_distance n={n}", lambda impl, x=a, y=b: kernels.edit_distance_table(x, y, impl=impl)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args(argv)
    impls = kernels.implementations()
    if "cython" not in impls:
        print("compiled kernels not built; only the fallback is available")
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'kernel':34s} {'python ms':>10s} {'cython ms':>10s} {'speed-up':>9s}")
    rng = np.random.default_rng(0)
    for name, fn in cases(rng):
        ref = fn(impls["python"])
        row = {"python": _median_time(lambda: fn(impls["python"]), args.repeat)}
        if "cython" in impls:
            got = fn(impls["cython"])
            pairs = zip(ref, got) if isinstance(ref, tuple) else [(ref, got)]
            for x, y in pairs:
                np.testing.assert_allclose(np.asarray(x), np.asarray(y), atol=1e-10)
            row["cython"] = _median_time(lambda: fn(impls["cython"]), args.repeat)
        py = row["python"] * 1e3
        cy = row.get("cython", float("nan")) * 1e3
        print(f"{name:34s} {py:10.4f} {cy:10.4f} {py / cy:8.1f}x")


if __name__ == "__main__":
    main()
