"""Centrality trio and the fused node ranking that steers walk sampling.

Betweenness uses Brandes' dependency accumulation, eigencentrality a damped
power iteration, closeness the Wasserman-Faust component normalization.
The three are fused by z-scoring each vector and taking a weighted sum;
the ranking is a stable descending sort with node-id tiebreak.
"""

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .kernels import bfs_distance_sums_kernel, brandes_kernel


@dataclass(frozen=True)
class CentralityScores:
    betweenness: np.ndarray
    eigen: np.ndarray
    closeness: np.ndarray


@dataclass(frozen=True)
class NodeRanking:
    weights: tuple              # the three fusion weights
    score_of: np.ndarray        # (n,) fused score per node
    rank_of: np.ndarray         # (n,) rank position per node, 0 = most central
    order: np.ndarray           # (n,) node ids sorted by rank position


def resolve_threads(threads=None):
    """Worker count: explicit arg, else PFHIN_THREADS, else 1."""
    if threads is None:
        raw = os.environ.get("PFHIN_THREADS", "1")
        try:
            threads = int(raw)
        except ValueError:
            raise ConfigError(f"PFHIN_THREADS must be an integer, got '{raw}'") from None
    if threads < 1:
        raise ConfigError(f"thread count must be >= 1, got {threads}")
    return threads


def _run_chunked(kernel, indptr, indices, n, threads, combine):
    """Split the source set across workers; kernels are pure so a plain
    reduction is safe.  Single-thread path avoids the executor entirely."""
    sources = np.arange(n, dtype=np.int64)
    if threads == 1 or n < 2 * threads:
        return kernel(indptr, indices, sources)
    chunks = np.array_split(sources, threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda c: kernel(indptr, indices, c), chunks))
    return combine(parts)


def betweenness(hin, threads=None):
    """Normalized betweenness: ordered-pair pass-through fractions divided by
    (n-1)(n-2).  Pairs in different components contribute 0."""
    n = hin.num_nodes
    if n == 0:
        return np.zeros(0, dtype=np.float64)
    raw = _run_chunked(brandes_kernel, hin.indptr, hin.indices, n,
                       resolve_threads(threads),
                       lambda parts: np.sum(parts, axis=0))
    if n > 2:
        raw = raw / ((n - 1) * (n - 2))
    return raw


def closeness(hin, threads=None):
    """Wasserman-Faust closeness: ((r-1)/sum_d) * ((r-1)/(n-1)) with r the
    reachable-set size including the node itself; isolated nodes score 0."""
    n = hin.num_nodes
    if n == 0:
        return np.zeros(0, dtype=np.float64)
    if n == 1:
        return np.zeros(1, dtype=np.float64)

    def combine(parts):
        return (np.concatenate([p[0] for p in parts]),
                np.concatenate([p[1] for p in parts]))

    dist_sum, reach = _run_chunked(bfs_distance_sums_kernel, hin.indptr,
                                   hin.indices, n, resolve_threads(threads),
                                   combine)
    out = np.zeros(n, dtype=np.float64)
    has = reach > 1
    r1 = (reach[has] - 1).astype(np.float64)
    out[has] = (r1 / dist_sum[has]) * (r1 / (n - 1))
    return out


def eigencentrality(hin, tol=1e-8, max_iter=1000):
    """Power iteration for the dominant adjacency eigenvector.

    Iterates on (A + I): same eigenvectors as A with spectrum shifted
    positive, which kills the period-2 oscillation bipartite graphs would
    otherwise feed the iteration.  Returns (unit nonnegative vector,
    converged flag); convergence means ||Ax - lambda x|| <= tol with
    lambda = x.A.x.  An edgeless graph gets the uniform vector.
    """
    if tol <= 0:
        raise ConfigError(f"tol must be > 0, got {tol}")
    if max_iter < 1:
        raise ConfigError(f"max_iter must be >= 1, got {max_iter}")
    n = hin.num_nodes
    if n == 0:
        return np.zeros(0, dtype=np.float64), True
    x = np.full(n, 1.0 / np.sqrt(n), dtype=np.float64)
    if hin.num_edges == 0:
        return x, True
    indices = hin.indices
    rows = np.repeat(np.arange(n), np.diff(hin.indptr))

    def matvec(v):
        # y = A v, scatter-summed per CSR row
        return np.bincount(rows, weights=v[indices], minlength=n)

    converged = False
    for _ in range(max_iter):
        ax = matvec(x)
        y = ax + x
        nrm = np.linalg.norm(y)
        if nrm == 0.0:
            break
        x = y / nrm
        ax = matvec(x)
        lam = float(x @ ax)
        if np.linalg.norm(ax - lam * x) <= tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"power iteration did not reach tol={tol} "
                      f"in {max_iter} iterations", RuntimeWarning)
    x = np.abs(x)  # sign convention; Perron vector is nonnegative anyway
    return x / np.linalg.norm(x), converged


def compute_centrality(hin, tol=1e-8, max_iter=1000, threads=None):
    eig, _ = eigencentrality(hin, tol=tol, max_iter=max_iter)
    return CentralityScores(
        betweenness=betweenness(hin, threads=threads),
        eigen=eig,
        closeness=closeness(hin, threads=threads))


def zscore(x):
    """Population z-score; a constant vector maps to all zeros."""
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    if sd == 0.0:
        return np.zeros_like(x)
    return (x - x.mean()) / sd


def rank_nodes(scores, weights=(1.0 / 3, 1.0 / 3, 1.0 / 3)):
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ConfigError(f"weights must be 3 nonnegative reals summing to 1, got {weights}")
    fused = (w[0] * zscore(scores.betweenness)
             + w[1] * zscore(scores.eigen)
             + w[2] * zscore(scores.closeness))
    order = np.argsort(-fused, kind="stable")  # ties fall back to node id
    rank_of = np.empty_like(order)
    rank_of[order] = np.arange(len(order))
    return NodeRanking(weights=tuple(w.tolist()), score_of=fused,
                       rank_of=rank_of, order=order)


def write_rank(hin, scores, ranking, path):
    """Emit ``node_id<TAB>betweenness<TAB>eigen<TAB>closeness<TAB>fused<TAB>rank``."""
    with open(path, "w", encoding="utf-8") as fh:
        for v in range(hin.num_nodes):
            fh.write(f"{v}\t{scores.betweenness[v]:.10g}\t{scores.eigen[v]:.10g}"
                     f"\t{scores.closeness[v]:.10g}\t{ranking.score_of[v]:.10g}"
                     f"\t{ranking.rank_of[v]}\n")
