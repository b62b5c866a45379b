"""Planted-community benchmark generator.

Nodes of several types are spread round-robin over communities; edges are
sampled independently per unordered pair with an intra-community or
inter-community probability. Class labels are the community ids, so the
planted structure doubles as ground truth for classification, clustering,
similarity grouping and link prediction.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .graph import make_hin

_DEFAULT_COUNTS = (260, 240, 180, 120)


@dataclass(frozen=True)
class SyntheticHinSpec:
    nodes_per_type: tuple = _DEFAULT_COUNTS
    communities: int = 4
    intra_prob: float = 0.04
    inter_prob: float = 0.003

    def __post_init__(self):
        if len(self.nodes_per_type) < 1 or any(
                c < 1 for c in self.nodes_per_type):
            raise ConfigError("nodes_per_type must be positive counts")
        if self.communities < 1:
            raise ConfigError("communities must be >= 1")
        for name in ("intra_prob", "inter_prob"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ConfigError(f"{name} must be in [0,1], got {p}")
        if min(self.nodes_per_type) < self.communities:
            raise ConfigError(
                "every type must reach every community: smallest type has "
                f"{min(self.nodes_per_type)} nodes for "
                f"{self.communities} communities")


def generate_hin(spec, seed):
    """Sample a Hin with planted communities; labels carry community ids."""
    counts = spec.nodes_per_type
    node_type = np.concatenate([
        np.full(c, t, dtype=np.int64) for t, c in enumerate(counts)])
    n = len(node_type)
    # round-robin inside each type so every (type, community) cell is filled
    community = np.concatenate([
        np.arange(c, dtype=np.int64) % spec.communities for c in counts])
    rng = np.random.default_rng((seed, 61))
    iu, iv = np.triu_indices(n, k=1)
    p = np.where(community[iu] == community[iv],
                 spec.intra_prob, spec.inter_prob)
    keep = rng.random(len(p)) < p
    src = iu[keep]
    dst = iv[keep]
    type_names = tuple(f"t{t}" for t in range(len(counts)))
    # one edge type per unordered endpoint-type pair keeps the schema
    # heterogeneous without inventing semantics
    lo = np.minimum(node_type[src], node_type[dst])
    hi = np.maximum(node_type[src], node_type[dst])
    etype_names = []
    etype_index = {}
    etypes = np.zeros(len(src), dtype=np.int64)
    for i, key in enumerate(zip(lo.tolist(), hi.tolist())):
        if key not in etype_index:
            etype_index[key] = len(etype_names)
            etype_names.append(f"t{key[0]}-t{key[1]}")
        etypes[i] = etype_index[key]
    edges = np.stack([src, dst, etypes], axis=1)
    if not etype_names:
        etype_names = ["none"]
    raw_ids = tuple(f"n{i}" for i in range(n))
    labels = tuple(f"c{c}" for c in community)
    return make_hin(node_type, edges, type_names, tuple(etype_names),
                    raw_ids=raw_ids, labels=labels), community


def modularity(hin, community):
    """Newman modularity of a node partition on the collapsed graph."""
    community = np.asarray(community)
    deg = np.diff(hin.indptr).astype(np.float64)
    two_m = deg.sum()
    if two_m == 0:
        return 0.0
    q = 0.0
    for c in np.unique(community):
        members = community == c
        internal = 0
        for v in np.flatnonzero(members):
            row = hin.indices[hin.indptr[v]:hin.indptr[v + 1]]
            internal += int(members[row].sum())
        q += internal / two_m - (deg[members].sum() / two_m) ** 2
    return float(q)
