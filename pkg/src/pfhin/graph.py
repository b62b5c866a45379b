"""Heterogeneous information network: load, query, split.

A Hin is an immutable typed multigraph.  Nodes and edges each carry exactly
one type id (total type mappings).  Edges are stored directed as read but
every query treats them as undirected.  Parallel edges are kept in the edge
list but collapsed in the adjacency index; self-loops are rejected at load.

File formats (UTF-8, tab-separated, ``#`` starts a comment line):

* node file:  ``node_type<TAB>node_id<TAB>label`` (label optional, ``-`` = none)
* edge file:  ``src_type<TAB>src_id<TAB>edge_type<TAB>dst_type<TAB>dst_id``

Raw ids are arbitrary strings, unique per node type; they are mapped to
dense 0-based integers in node-file order.  ``write_vocab`` emits the
mapping as ``<name>.vocab.tsv``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class Hin:
    node_type: np.ndarray        # (n,) int64, type id per node
    edges: np.ndarray            # (m, 3) int64 rows (src, dst, edge_type); row index = order-index
    node_types: tuple            # type-id -> name
    edge_types: tuple
    raw_ids: tuple               # dense id -> raw string id
    labels: tuple                # dense id -> label string or None
    indptr: np.ndarray = field(repr=False, default=None)   # CSR over collapsed simple graph
    indices: np.ndarray = field(repr=False, default=None)  # neighbor ids, ascending per node
    adj_etype: np.ndarray = field(repr=False, default=None)  # edge type of first edge seen per pair

    @property
    def num_nodes(self):
        return len(self.node_type)

    @property
    def num_edges(self):
        return len(self.edges)

    def nodes_of_type(self, t):
        """Dense ids of all nodes with type id ``t``, ascending."""
        return np.flatnonzero(self.node_type == t)

    def degree(self, v):
        self._check_node(v)
        return int(self.indptr[v + 1] - self.indptr[v])

    def has_edge(self, u, v):
        """Undirected adjacency test on the collapsed simple graph."""
        self._check_node(u)
        self._check_node(v)
        row = self.indices[self.indptr[u]:self.indptr[u + 1]]
        i = np.searchsorted(row, v)
        return bool(i < len(row) and row[i] == v)

    def _check_node(self, v):
        if not (0 <= v < self.num_nodes):
            raise DataError(f"node id {v} out of range [0, {self.num_nodes})")

    def validate(self):
        """Re-check every structural invariant; raises DataError on violation."""
        n = self.num_nodes
        if len(self.node_types) < 1:
            raise DataError("graph must declare at least one node type")
        if self.num_edges > 0 and len(self.edge_types) < 1:
            raise DataError("graph with edges must declare at least one edge type")
        if np.any(self.node_type < 0) or np.any(self.node_type >= len(self.node_types)):
            raise DataError("node type id out of range")
        if self.num_edges:
            e = self.edges
            if e[:, :2].min() < 0 or e[:, :2].max() >= n:
                raise DataError("edge endpoint out of range")
            if e[:, 2].min() < 0 or e[:, 2].max() >= len(self.edge_types):
                raise DataError("edge type id out of range")
            if np.any(e[:, 0] == e[:, 1]):
                raise DataError("self-loop present")
        # adjacency must agree with the edge list (round-trip)
        indptr, indices, _ = _build_adjacency(n, self.edges)
        if not (np.array_equal(indptr, self.indptr)
                and np.array_equal(indices, self.indices)):
            raise DataError("adjacency index does not match edge list")


def _build_adjacency(n, edges):
    """CSR over the collapsed undirected simple graph."""
    if len(edges) == 0:
        return (np.zeros(n + 1, dtype=np.int64),
                np.empty(0, dtype=np.int64),
                np.empty(0, dtype=np.int64))
    u = edges[:, 0]
    v = edges[:, 1]
    et = edges[:, 2]
    src = np.concatenate([u, v])
    dst = np.concatenate([v, u])
    ety = np.concatenate([et, et])
    # stable sort by (src, dst) keeps the first-seen edge type per pair
    order = np.lexsort((dst, src))
    src, dst, ety = src[order], dst[order], ety[order]
    pair_key = src * n + dst
    first = np.concatenate([[True], pair_key[1:] != pair_key[:-1]])
    src, dst, ety = src[first], dst[first], ety[first]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, dst.astype(np.int64), ety.astype(np.int64)


def make_hin(node_type, edges, node_types, edge_types, raw_ids=None, labels=None):
    """Assemble and validate a Hin from dense arrays."""
    node_type = np.asarray(node_type, dtype=np.int64)
    n = len(node_type)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
    if raw_ids is None:
        raw_ids = tuple(str(i) for i in range(n))
    if labels is None:
        labels = (None,) * n
    indptr, indices, adj_etype = _build_adjacency(n, edges)
    hin = Hin(node_type=node_type, edges=edges,
              node_types=tuple(node_types), edge_types=tuple(edge_types),
              raw_ids=tuple(raw_ids), labels=tuple(labels),
              indptr=indptr, indices=indices, adj_etype=adj_etype)
    hin.validate()
    return hin


def _read_rows(path, n_fields_min, n_fields_max):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if not (n_fields_min <= len(fields) <= n_fields_max):
                raise DataError(
                    f"{path}:{lineno}: expected {n_fields_min}"
                    + (f"-{n_fields_max}" if n_fields_max != n_fields_min else "")
                    + f" tab-separated fields, got {len(fields)}")
            rows.append((lineno, fields))
    return rows


def load_hin(edge_file, node_file):
    """Parse the node and edge TSVs into a validated Hin.

    Node/edge type ids follow first-appearance order in their files; dense
    node ids follow node-file order.
    """
    node_rows = _read_rows(node_file, 2, 3)
    type_names = []
    type_index = {}
    key_to_dense = {}
    node_type = []
    raw_ids = []
    labels = []
    for lineno, fields in node_rows:
        tname, rid = fields[0], fields[1]
        label = fields[2] if len(fields) == 3 and fields[2] != "-" else None
        if tname not in type_index:
            type_index[tname] = len(type_names)
            type_names.append(tname)
        key = (tname, rid)
        if key in key_to_dense:
            raise DataError(f"{node_file}:{lineno}: duplicate node id {tname}/{rid}")
        key_to_dense[key] = len(raw_ids)
        node_type.append(type_index[tname])
        raw_ids.append(rid)
        labels.append(label)
    if not type_names:
        raise DataError(f"{node_file}: no nodes declared")

    edge_rows = _read_rows(edge_file, 5, 5)
    etype_names = []
    etype_index = {}
    edges = []
    for lineno, fields in edge_rows:
        st, sid, et, dt, did = fields
        for tname in (st, dt):
            if tname not in type_index:
                raise DataError(
                    f"{edge_file}:{lineno}: unknown node type token '{tname}'")
        try:
            u = key_to_dense[(st, sid)]
        except KeyError:
            raise DataError(
                f"{edge_file}:{lineno}: dangling endpoint {st}/{sid}") from None
        try:
            v = key_to_dense[(dt, did)]
        except KeyError:
            raise DataError(
                f"{edge_file}:{lineno}: dangling endpoint {dt}/{did}") from None
        if u == v:
            raise DataError(f"{edge_file}:{lineno}: self-loop on {st}/{sid}")
        if et not in etype_index:
            etype_index[et] = len(etype_names)
            etype_names.append(et)
        edges.append((u, v, etype_index[et]))

    return make_hin(node_type, np.asarray(edges, dtype=np.int64).reshape(-1, 3),
                    type_names, etype_names, raw_ids, labels)


def save_hin(hin, edge_file, node_file):
    """Re-serialize to the TSV formats; reproduces the input edge multiset."""
    with open(node_file, "w", encoding="utf-8") as fh:
        for v in range(hin.num_nodes):
            label = hin.labels[v] if hin.labels[v] is not None else "-"
            fh.write(f"{hin.node_types[hin.node_type[v]]}\t{hin.raw_ids[v]}\t{label}\n")
    with open(edge_file, "w", encoding="utf-8") as fh:
        for u, v, et in hin.edges:
            fh.write("\t".join([
                hin.node_types[hin.node_type[u]], hin.raw_ids[u],
                hin.edge_types[et],
                hin.node_types[hin.node_type[v]], hin.raw_ids[v]]) + "\n")


def write_vocab(hin, path):
    """Emit the dense-id mapping: ``dense_id<TAB>node_type<TAB>raw_id``."""
    with open(path, "w", encoding="utf-8") as fh:
        for v in range(hin.num_nodes):
            fh.write(f"{v}\t{hin.node_types[hin.node_type[v]]}\t{hin.raw_ids[v]}\n")


def neighbors(hin, v):
    """All (neighbor, edge_type) pairs incident to v, ascending neighbor id.

    Undirected view of the collapsed simple graph; the edge type is the
    first one seen for the pair in file order.
    """
    hin._check_node(v)
    lo, hi = hin.indptr[v], hin.indptr[v + 1]
    return list(zip(hin.indices[lo:hi].tolist(), hin.adj_etype[lo:hi].tolist()))


@dataclass(frozen=True)
class LinkSplit:
    train_edges: np.ndarray   # (a, 3) int64 (src, dst, edge_type)
    test_pos: np.ndarray      # (b, 3)
    test_neg: np.ndarray      # (b, 2) node pairs that are non-edges


def _pair_key(u, v):
    return (u, v) if u < v else (v, u)


def split_links(hin, train_ratio, rng_seed, max_tries_factor=200):
    """Order-index split: earlier edges train, later edges evaluate.

    Test positives drop any pair already linked in train and duplicate pairs
    within the remainder.  Negatives are uniform non-edges of the full
    graph, one per positive, drawn with ``rng_seed``.
    """
    if not (0.0 < train_ratio < 1.0):
        raise DataError(f"train_ratio must be in (0,1), got {train_ratio}")
    m = hin.num_edges
    if m < 2:
        raise DataError(f"link split needs at least 2 edges, graph has {m}")
    cut = int(train_ratio * m)
    cut = min(max(cut, 1), m - 1)
    train = hin.edges[:cut]
    train_pairs = {_pair_key(int(u), int(v)) for u, v, _ in train}
    test_pos = []
    seen = set()
    for u, v, et in hin.edges[cut:]:
        key = _pair_key(int(u), int(v))
        if key in train_pairs or key in seen:
            continue
        seen.add(key)
        test_pos.append((int(u), int(v), int(et)))
    if not test_pos:
        raise DataError("no evaluation edges remain after removing duplicates")

    all_pairs = {_pair_key(int(u), int(v)) for u, v, _ in hin.edges}
    n = hin.num_nodes
    want = len(test_pos)
    possible = n * (n - 1) // 2 - len(all_pairs)
    if possible < want:
        raise DataError(
            f"cannot sample {want} negative pairs: only {possible} non-edges exist")
    rng = np.random.default_rng(rng_seed)
    neg = []
    neg_seen = set()
    tries = 0
    limit = max_tries_factor * want
    while len(neg) < want:
        if tries >= limit:
            raise DataError(
                f"negative sampling failed after {limit} tries (graph too dense)")
        tries += 1
        u = int(rng.integers(n))
        v = int(rng.integers(n))
        if u == v:
            continue
        key = _pair_key(u, v)
        if key in all_pairs or key in neg_seen:
            continue
        neg_seen.add(key)
        neg.append(key)
    return LinkSplit(
        train_edges=np.asarray(train, dtype=np.int64).reshape(-1, 3),
        test_pos=np.asarray(test_pos, dtype=np.int64).reshape(-1, 3),
        test_neg=np.asarray(neg, dtype=np.int64).reshape(-1, 2))
