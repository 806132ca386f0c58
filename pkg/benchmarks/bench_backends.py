"""Benchmark the numba kernels against their pure-numpy fallbacks.

Runs the hot paths (neighbour candidate enumeration, triplet pairing,
segment reductions) on representative workloads, checks that both
backends agree, and prints a timing table.

Usage: python benchmarks/bench_backends.py [--repeats N]
"""

import argparse
import time

import numpy as np

from cellmend import _kernels
from cellmend.backend import NUMBA_ENABLED
from cellmend.core import supercell_bound, wrap_frac
from cellmend.graph import KNN, build_graph
from cellmend.train import synth_dataset


def timeit(fn, repeats):
    fn()  # warm up (jit compilation, caches)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_pair(name, fn_numba, fn_numpy, check, repeats):
    out_a = fn_numba()
    out_b = fn_numpy()
    check(out_a, out_b)
    ta = timeit(fn_numba, repeats)
    tb = timeit(fn_numpy, repeats)
    print(f"{name:<28} numba {ta * 1e3:8.3f} ms   numpy {tb * 1e3:8.3f} ms   "
          f"speedup {tb / ta:5.1f}x")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()

    if not NUMBA_ENABLED:
        raise SystemExit(
            "numba backend unavailable (CELLMEND_NUMBA=0 or numba missing); "
            "nothing to compare"
        )

    rng = np.random.default_rng(0)
    mats = synth_dataset(16, "mixed", seed=3)

    # --- edge candidate enumeration over a full batch of cells -------------
    def run_candidates(fn):
        out = []
        for m in mats:
            cut = np.full(m.n_atoms, 5.0)
            tmax = supercell_bound(m.rho, 5.0)
            out.append(fn(np.ascontiguousarray(m.x),
                          np.ascontiguousarray(m.rho), tmax, cut))
        return out

    def check_candidates(a, b):
        for (ia, ja, ta_, ra), (ib, jb, tb_, rb) in zip(a, b):
            ka = sorted(zip(ia.tolist(), ja.tolist(), map(tuple, ta_.tolist())))
            kb = sorted(zip(ib.tolist(), jb.tolist(), map(tuple, tb_.tolist())))
            assert ka == kb
            assert np.allclose(sorted(ra), sorted(rb), atol=1e-12)

    bench_pair(
        "edge candidates (16 cells)",
        lambda: run_candidates(_kernels.edge_candidates_numba),
        lambda: run_candidates(_kernels.edge_candidates_numpy),
        check_candidates,
        args.repeats,
    )

    # --- triplet pairing ----------------------------------------------------
    graphs = [build_graph(m, KNN(8)) for m in mats]

    def run_triplets(fn):
        out = []
        for g in graphs:
            out.append(fn(g.src, g.dst, g.tau, g.out_start))
        return out

    def check_triplets(a, b):
        for (fa, sa), (fb, sb) in zip(a, b):
            assert np.array_equal(fa, fb) and np.array_equal(sa, sb)

    bench_pair(
        "triplet pairing (16 graphs)",
        lambda: run_triplets(_kernels.triplet_pairs_numba),
        lambda: run_triplets(_kernels.triplet_pairs_numpy),
        check_triplets,
        args.repeats,
    )

    # --- segment reductions (batch-sized arrays) ----------------------------
    e, f, nodes = 4096, 64, 512
    values = rng.standard_normal((e, f))
    counts = rng.multinomial(e, np.full(nodes, 1.0 / nodes))
    starts = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)
    idx = rng.integers(0, nodes, size=e)

    bench_pair(
        "segment_sum_rows (4096x64)",
        lambda: _kernels.segment_sum_rows_numba(values, starts),
        lambda: _kernels.segment_sum_rows_numpy(values, starts),
        lambda a, b: np.testing.assert_allclose(a, b, atol=1e-9),
        args.repeats,
    )
    bench_pair(
        "scatter_add_rows (4096x64)",
        lambda: _kernels.scatter_add_rows_numba(values, idx, nodes),
        lambda: _kernels.scatter_add_rows_numpy(values, idx, nodes),
        lambda a, b: np.testing.assert_allclose(a, b, atol=1e-9),
        args.repeats,
    )

    a3 = rng.standard_normal((e, 3))
    b3 = rng.standard_normal((e, 3))
    w = rng.standard_normal(e)
    mats33 = rng.standard_normal((e, 3, 3))
    sample_starts = np.arange(0, e + 1, e // 64).astype(np.int64)

    bench_pair(
        "segment_outer (4096)",
        lambda: _kernels.segment_outer_numba(a3, b3, sample_starts),
        lambda: _kernels.segment_outer_numpy(a3, b3, sample_starts),
        lambda a, b: np.testing.assert_allclose(a, b, atol=1e-9),
        args.repeats,
    )
    bench_pair(
        "weighted_matsum (4096)",
        lambda: _kernels.segment_weighted_matsum_numba(w, mats33, sample_starts),
        lambda: _kernels.segment_weighted_matsum_numpy(w, mats33, sample_starts),
        lambda a, b: np.testing.assert_allclose(a, b, atol=1e-9),
        args.repeats,
    )

    # --- end to end graph build ---------------------------------------------
    import os
    import subprocess
    import sys

    print("\nend-to-end graph build (CELLMEND_NUMBA={0,1}):")
    snippet = (
        "import time, numpy as np\n"
        "from cellmend.graph import build_graph, KNN\n"
        "from cellmend.train import synth_dataset\n"
        "mats = synth_dataset(64, 'mixed', seed=3)\n"
        "for m in mats: build_graph(m, KNN(8))\n"
        "t0 = time.perf_counter()\n"
        "for _ in range(5):\n"
        "    for m in mats: build_graph(m, KNN(8))\n"
        "print((time.perf_counter() - t0) / 5)\n"
    )
    for flag in ("1", "0"):
        env = dict(os.environ, CELLMEND_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", snippet], env=env,
                             capture_output=True, text=True, check=True)
        label = "numba" if flag == "1" else "numpy"
        print(f"  {label}: {float(out.stdout.strip()) * 1e3:8.2f} ms per 64-cell batch")


if __name__ == "__main__":
    main()
