"""Rank-guided heterogeneous walk sampling and type-based mini-sequences.

A walk starts at a seed, repeatedly moves to the best-ranked not-yet-collected
neighbor, restarts to the seed with probability restart_prob, and collects
until it holds min(k, |component|) distinct nodes.  When the current node and
the seed are both exhausted the walk jumps to the best-ranked uncollected
node adjacent to anything already collected; the literal restart rule alone
would spin forever at a local dead end.

Per-type quotas are repaired after the walk: the worst-ranked over-quota
nodes are swapped for the best-ranked reachable nodes of each missing type.
An infeasible quota (component too small or type absent) is reported as a
warning, never silently dropped.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

_STRATEGIES = ("rank_guided", "bfs", "dfs", "random")


@dataclass(frozen=True)
class WalkConfig:
    k: int = 20
    restart_prob: float = 0.15
    min_per_type: int = 1
    strategy: str = "rank_guided"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"walk length k must be >= 1, got {self.k}")
        if not (0.0 <= self.restart_prob <= 1.0):
            raise ConfigError(f"restart_prob must be in [0,1], got {self.restart_prob}")
        if self.min_per_type < 1:
            raise ConfigError(f"min_per_type must be >= 1, got {self.min_per_type}")
        if self.strategy not in _STRATEGIES:
            raise ConfigError(f"unknown strategy '{self.strategy}', "
                              f"expected one of {_STRATEGIES}")


@dataclass(frozen=True)
class NodeSequence:
    seed: int
    nodes: np.ndarray   # (L,) int64, unique, nodes[0] == seed
    ranks: np.ndarray   # (L,) int64, global rank position per node


@dataclass(frozen=True)
class MiniSequence:
    node_type: int
    nodes: np.ndarray   # sorted by ascending global rank position
    ranks: np.ndarray


def _component_data(hin):
    """Component label per node plus per-(component, type) counts, memoized
    on the Hin (immutable, so the cache can never go stale)."""
    cached = getattr(hin, "_component_cache", None)
    if cached is not None:
        return cached
    n = hin.num_nodes
    labels = np.full(n, -1, dtype=np.int64)
    comp = 0
    for s in range(n):
        if labels[s] >= 0:
            continue
        labels[s] = comp
        stack = [s]
        while stack:
            v = stack.pop()
            for w in hin.indices[hin.indptr[v]:hin.indptr[v + 1]]:
                if labels[w] < 0:
                    labels[w] = comp
                    stack.append(w)
        comp += 1
    counts = np.zeros((comp, len(hin.node_types)), dtype=np.int64)
    np.add.at(counts, (labels, hin.node_type), 1)
    object.__setattr__(hin, "_component_cache", (labels, counts))
    return labels, counts


def _neighbors_uncollected(hin, v, in_set):
    row = hin.indices[hin.indptr[v]:hin.indptr[v + 1]]
    return [int(w) for w in row if w not in in_set]


def _frontier(hin, collected, in_set):
    out = []
    for v in collected:
        out.extend(_neighbors_uncollected(hin, v, in_set))
    return out


def _best_ranked(cands, rank_of):
    return min(cands, key=lambda v: rank_of[v])


def _walk_rank_guided(hin, rank_of, seed, cfg, rng):
    collected = [seed]
    in_set = {seed}
    current = seed
    while len(collected) < cfg.k:
        if cfg.restart_prob > 0.0 and rng.random() < cfg.restart_prob:
            current = seed
        cands = _neighbors_uncollected(hin, current, in_set)
        if not cands:
            cands = _neighbors_uncollected(hin, seed, in_set)
        if not cands:
            cands = _frontier(hin, collected, in_set)
            if not cands:
                break  # component exhausted
        nxt = _best_ranked(cands, rank_of)
        collected.append(nxt)
        in_set.add(nxt)
        current = nxt
    return collected


def _walk_bfs(hin, rank_of, seed, cfg):
    """The k hop-nearest nodes, rank-ordered within each distance layer."""
    collected = [seed]
    in_set = {seed}
    layer = [seed]
    while len(collected) < cfg.k and layer:
        nxt = set()
        for v in layer:
            nxt.update(_neighbors_uncollected(hin, v, in_set))
        layer = sorted(nxt, key=lambda v: rank_of[v])
        for v in layer:
            if len(collected) >= cfg.k:
                break
            collected.append(v)
            in_set.add(v)
    return collected


def _walk_dfs(hin, rank_of, seed, cfg):
    collected = []
    in_set = set()
    stack = [seed]
    while stack and len(collected) < cfg.k:
        v = stack.pop()
        if v in in_set:
            continue
        collected.append(v)
        in_set.add(v)
        nbrs = _neighbors_uncollected(hin, v, in_set)
        # push worst rank first so the best pops next
        for w in sorted(nbrs, key=lambda u: rank_of[u], reverse=True):
            stack.append(w)
    return collected


def _walk_random(hin, rank_of, seed, cfg, rng):
    collected = [seed]
    in_set = {seed}
    current = seed
    budget = 200 * cfg.k
    steps = 0
    while len(collected) < cfg.k:
        if steps >= budget:
            # the chain is mixing too slowly; fill from the frontier
            cands = _frontier(hin, collected, in_set)
            if not cands:
                break
            nxt = int(cands[rng.integers(len(cands))])
            collected.append(nxt)
            in_set.add(nxt)
            continue
        steps += 1
        if cfg.restart_prob > 0.0 and rng.random() < cfg.restart_prob:
            current = seed
        row = hin.indices[hin.indptr[current]:hin.indptr[current + 1]]
        if len(row) == 0:
            break  # isolated seed
        current = int(row[rng.integers(len(row))])
        if current not in in_set:
            collected.append(current)
            in_set.add(current)
    return collected


def _repair_quota(hin, rank_of, seed, cfg, collected):
    """Swap worst-ranked surplus nodes for missing-type nodes. The seed is
    never evicted.  Returns the repaired list; warns on infeasible quotas."""
    labels, counts = _component_data(hin)
    comp = labels[seed]
    reach_counts = counts[comp]
    quotas = np.minimum(cfg.min_per_type, reach_counts)
    absent = [hin.node_types[t] for t in range(len(quotas))
              if 0 < reach_counts[t] < cfg.min_per_type]
    if absent:
        warnings.warn(
            f"quota shortfall: component of seed {seed} has fewer than "
            f"{cfg.min_per_type} nodes of type(s) {absent}", RuntimeWarning)
    if quotas.sum() > len(collected):
        warnings.warn(
            f"quota infeasible: {int(quotas.sum())} reserved slots exceed "
            f"walk length {len(collected)} for seed {seed}", RuntimeWarning)

    have = np.zeros(len(quotas), dtype=np.int64)
    for v in collected:
        have[hin.node_type[v]] += 1
    in_set = set(collected)
    for t in np.argsort(-(quotas - have)):  # worst deficits first
        while have[t] < quotas[t]:
            pool = np.flatnonzero((labels == comp)
                                  & (hin.node_type == t))
            pool = [int(v) for v in pool if v not in in_set]
            if not pool:
                break
            incoming = _best_ranked(pool, rank_of)
            # evict the worst-ranked node of an over-quota type, not the seed
            evictable = [(i, v) for i, v in enumerate(collected)
                         if v != seed and have[hin.node_type[v]] > quotas[hin.node_type[v]]]
            if not evictable:
                warnings.warn(
                    f"quota infeasible: no over-quota node to evict for "
                    f"type '{hin.node_types[t]}' at seed {seed}", RuntimeWarning)
                break
            i, victim = max(evictable, key=lambda iv: rank_of[iv[1]])
            collected[i] = incoming
            in_set.discard(victim)
            in_set.add(incoming)
            have[hin.node_type[victim]] -= 1
            have[t] += 1
    return collected


def sample_sequence(hin, ranking, seed, cfg, rng_seed):
    """One walk from ``seed``; deterministic given all five arguments."""
    if not (0 <= seed < hin.num_nodes):
        raise DataError(f"walk seed {seed} out of range [0, {hin.num_nodes})")
    rank_of = ranking.rank_of
    if len(rank_of) != hin.num_nodes:
        raise DataError("ranking does not cover the graph")
    rng = np.random.default_rng((rng_seed, seed))
    if cfg.strategy == "rank_guided":
        collected = _walk_rank_guided(hin, rank_of, seed, cfg, rng)
    elif cfg.strategy == "bfs":
        collected = _walk_bfs(hin, rank_of, seed, cfg)
    elif cfg.strategy == "dfs":
        collected = _walk_dfs(hin, rank_of, seed, cfg)
    else:
        collected = _walk_random(hin, rank_of, seed, cfg, rng)
    if len(hin.node_types) > 1:
        collected = _repair_quota(hin, rank_of, seed, cfg, collected)
    nodes = np.asarray(collected, dtype=np.int64)
    return NodeSequence(seed=seed, nodes=nodes, ranks=rank_of[nodes])


def group_mini_sequences(seq, hin):
    """Partition a sequence by node type; each group sorted by global rank."""
    out = []
    types_present = np.unique(hin.node_type[seq.nodes])
    for t in types_present:
        mask = hin.node_type[seq.nodes] == t
        nodes = seq.nodes[mask]
        ranks = seq.ranks[mask]
        order = np.argsort(ranks, kind="stable")
        out.append(MiniSequence(node_type=int(t), nodes=nodes[order],
                                ranks=ranks[order]))
    return out


def write_seq(sequences, path):
    """``seed_id<TAB>node:rank,node:rank,...`` one line per seed."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in sequences:
            body = ",".join(f"{v}:{r}" for v, r in zip(s.nodes, s.ranks))
            fh.write(f"{s.seed}\t{body}\n")


def write_mini(seed_to_minis, path):
    """``seed_id<TAB>type_name<TAB>node:rank,...`` one line per group."""
    with open(path, "w", encoding="utf-8") as fh:
        for seed, hin, minis in seed_to_minis:
            for m in minis:
                body = ",".join(f"{v}:{r}" for v, r in zip(m.nodes, m.ranks))
                fh.write(f"{seed}\t{hin.node_types[m.node_type]}\t{body}\n")
