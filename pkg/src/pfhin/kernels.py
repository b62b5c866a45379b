"""Hot graph kernels: numba-jitted with a pure-numpy twin.

The per-source BFS loops (Brandes accumulation, closeness distance sums)
dominate the graph-side runtime.  Both kernels exist twice with identical
signatures and results: a numba ``@njit(cache=True, nogil=True)`` version
and a plain numpy/python fallback.  Set ``PFHIN_NO_NUMBA=1`` to force the
fallback (or it is used automatically when numba is not importable).

Graphs enter as CSR adjacency: ``indptr`` (n+1,) int64 and ``indices``
(m,) int64 over the collapsed undirected simple graph.
"""

import os

import numpy as np

_env_off = os.environ.get("PFHIN_NO_NUMBA", "") not in ("", "0")

try:
    if _env_off:
        raise ImportError
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:
    _HAVE_NUMBA = False


def using_numba():
    """True when the jitted kernel path is active."""
    return _HAVE_NUMBA


# ---------------------------------------------------------------------------
# pure numpy/python implementations
# ---------------------------------------------------------------------------

def brandes_numpy(indptr, indices, sources):
    """Per-source dependency accumulation over shortest-path DAGs.

    Returns the raw (ordered-pair) betweenness contribution vector for the
    given source set; no normalization.
    """
    n = len(indptr) - 1
    between = np.zeros(n, dtype=np.float64)
    for s in sources:
        dist = np.full(n, -1, dtype=np.int64)
        sigma = np.zeros(n, dtype=np.float64)
        order = np.empty(n, dtype=np.int64)
        dist[s] = 0
        sigma[s] = 1.0
        order[0] = s
        head, tail = 0, 1
        while head < tail:
            v = order[head]
            head += 1
            dv = dist[v]
            for w in indices[indptr[v]:indptr[v + 1]]:
                if dist[w] < 0:
                    dist[w] = dv + 1
                    order[tail] = w
                    tail += 1
                if dist[w] == dv + 1:
                    sigma[w] += sigma[v]
        delta = np.zeros(n, dtype=np.float64)
        for i in range(tail - 1, 0, -1):
            w = order[i]
            coeff = (1.0 + delta[w]) / sigma[w]
            dw = dist[w]
            for v in indices[indptr[w]:indptr[w + 1]]:
                if dist[v] == dw - 1:
                    delta[v] += sigma[v] * coeff
            between[w] += delta[w]
    return between


def bfs_distance_sums_numpy(indptr, indices, sources):
    """For each source: (sum of BFS distances to reachable nodes, reachable count).

    The reachable count includes the source itself; the distance sum does not
    (d(s,s)=0 contributes nothing).
    """
    n = len(indptr) - 1
    dist_sum = np.zeros(len(sources), dtype=np.float64)
    reach = np.zeros(len(sources), dtype=np.int64)
    for k, s in enumerate(sources):
        dist = np.full(n, -1, dtype=np.int64)
        order = np.empty(n, dtype=np.int64)
        dist[s] = 0
        order[0] = s
        head, tail = 0, 1
        total = 0
        while head < tail:
            v = order[head]
            head += 1
            dv = dist[v]
            total += dv
            for w in indices[indptr[v]:indptr[v + 1]]:
                if dist[w] < 0:
                    dist[w] = dv + 1
                    order[tail] = w
                    tail += 1
        dist_sum[k] = total
        reach[k] = tail
    return dist_sum, reach


# ---------------------------------------------------------------------------
# numba twins (same algorithms; loops compile to machine code)
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _brandes_jit(indptr, indices, sources):
        n = len(indptr) - 1
        between = np.zeros(n, dtype=np.float64)
        for si in range(len(sources)):
            s = sources[si]
            dist = np.full(n, -1, dtype=np.int64)
            sigma = np.zeros(n, dtype=np.float64)
            order = np.empty(n, dtype=np.int64)
            dist[s] = 0
            sigma[s] = 1.0
            order[0] = s
            head, tail = 0, 1
            while head < tail:
                v = order[head]
                head += 1
                dv = dist[v]
                for j in range(indptr[v], indptr[v + 1]):
                    w = indices[j]
                    if dist[w] < 0:
                        dist[w] = dv + 1
                        order[tail] = w
                        tail += 1
                    if dist[w] == dv + 1:
                        sigma[w] += sigma[v]
            delta = np.zeros(n, dtype=np.float64)
            for i in range(tail - 1, 0, -1):
                w = order[i]
                coeff = (1.0 + delta[w]) / sigma[w]
                dw = dist[w]
                for j in range(indptr[w], indptr[w + 1]):
                    v = indices[j]
                    if dist[v] == dw - 1:
                        delta[v] += sigma[v] * coeff
                between[w] += delta[w]
        return between

    @njit(cache=True, nogil=True)
    def _bfs_distance_sums_jit(indptr, indices, sources):
        n = len(indptr) - 1
        dist_sum = np.zeros(len(sources), dtype=np.float64)
        reach = np.zeros(len(sources), dtype=np.int64)
        for k in range(len(sources)):
            s = sources[k]
            dist = np.full(n, -1, dtype=np.int64)
            order = np.empty(n, dtype=np.int64)
            dist[s] = 0
            order[0] = s
            head, tail = 0, 1
            total = 0
            while head < tail:
                v = order[head]
                head += 1
                dv = dist[v]
                total += dv
                for j in range(indptr[v], indptr[v + 1]):
                    w = indices[j]
                    if dist[w] < 0:
                        dist[w] = dv + 1
                        order[tail] = w
                        tail += 1
            dist_sum[k] = total
            reach[k] = tail
        return dist_sum, reach

    def brandes_jit(indptr, indices, sources):
        return _brandes_jit(indptr, indices, sources)

    def bfs_distance_sums_jit(indptr, indices, sources):
        return _bfs_distance_sums_jit(indptr, indices, sources)

else:
    brandes_jit = None
    bfs_distance_sums_jit = None


# active bindings: jitted when available, numpy otherwise
brandes_kernel = brandes_jit if _HAVE_NUMBA else brandes_numpy
bfs_distance_sums_kernel = (
    bfs_distance_sums_jit if _HAVE_NUMBA else bfs_distance_sums_numpy
)
