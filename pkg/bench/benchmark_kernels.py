"""Benchmark the jitted graph kernels against their pure-numpy twins.

Runs Brandes betweenness accumulation and BFS distance sums over synthetic
heterogeneous graphs of increasing size, checks that both code paths agree,
and reports wall times. The first jitted call includes compilation and is
timed separately.

Usage:
    python3 bench/benchmark_kernels.py [--sizes 200,400,800] [--repeats 3]
"""

import argparse
import time

import numpy as np

from pfhin.kernels import (bfs_distance_sums_jit, bfs_distance_sums_numpy,
                           brandes_jit, brandes_numpy, using_numba)
from pfhin.synth import SyntheticHinSpec, generate_hin


def build_graph(n, seed):
    per = max(4, n // 4)
    spec = SyntheticHinSpec(nodes_per_type=(per, per, per, per),
                            communities=4, intra_prob=min(0.5, 24.0 / per),
                            inter_prob=min(0.2, 2.0 / per))
    hin, _ = generate_hin(spec, seed=seed)
    return hin


def timed(fn, *args, repeats=3):
    best = np.inf
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="200,400,800")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    if brandes_jit is None:
        print("numba unavailable or disabled (PFHIN_NO_NUMBA); "
              "nothing to compare")
        return
    print(f"numba active: {using_numba()}")

    # pay compilation once on a toy graph, report it
    toy = build_graph(16, args.seed)
    src = np.arange(toy.num_nodes, dtype=np.int64)
    t0 = time.perf_counter()
    brandes_jit(toy.indptr, toy.indices, src)
    bfs_distance_sums_jit(toy.indptr, toy.indices, src)
    print(f"jit compile + first call: {time.perf_counter() - t0:.2f}s\n")

    hdr = (f"{'n':>6} {'edges':>7}  {'kernel':<18} {'numpy':>9} "
           f"{'numba':>9} {'speedup':>8}  agree")
    print(hdr)
    print("-" * len(hdr))
    for n in sizes:
        hin = build_graph(n, args.seed)
        sources = np.arange(hin.num_nodes, dtype=np.int64)
        cases = [("brandes", brandes_numpy, brandes_jit),
                 ("bfs_distance_sums", bfs_distance_sums_numpy,
                  bfs_distance_sums_jit)]
        for name, f_np, f_nb in cases:
            t_np, out_np = timed(f_np, hin.indptr, hin.indices, sources,
                                 repeats=args.repeats)
            t_nb, out_nb = timed(f_nb, hin.indptr, hin.indices, sources,
                                 repeats=args.repeats)
            if name == "brandes":
                agree = np.allclose(out_np, out_nb, atol=1e-9)
            else:
                agree = (np.allclose(out_np[0], out_nb[0], atol=1e-9)
                         and np.array_equal(out_np[1], out_nb[1]))
            print(f"{hin.num_nodes:>6} {hin.num_edges:>7}  {name:<18} "
                  f"{t_np:>8.4f}s {t_nb:>8.4f}s {t_np / t_nb:>7.1f}x  "
                  f"{'yes' if agree else 'NO'}")


if __name__ == "__main__":
    main()
