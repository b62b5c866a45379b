"""Downstream task heads on top of the pretrained encoder: link
prediction, node similarity, node classification, and k-means clustering.

Each task reuses the walk-sequence input pipeline. Link prediction feeds a
two-segment pair and reads the leading summary token; similarity,
classification and clustering read the seed node's own token output (or a
mean pool, by config). The only trainable additions are the documented
head matrices: 2xH for links, KxH for classification, nothing for
similarity or clustering.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, recording
from .encoder import TokenRun, encode_examples, gather_positions
from .errors import ConfigError, DataError
from .walker import group_mini_sequences

LINK_GRID = {"lr": (0.01, 0.02, 0.025, 0.05),
             "epochs": (2, 3, 4, 5),
             "batch_size": (16, 32, 64)}

_POOLS = ("seed", "mean")


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 0.01
    epochs: int = 3
    batch_size: int = 32
    max_pairs: int = 1200
    freeze_encoder: bool = False
    pool: str = "seed"
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.max_pairs < 2:
            raise ConfigError("max_pairs must be >= 2")
        if self.pool not in _POOLS:
            raise ConfigError(f"pool must be one of {_POOLS}, got '{self.pool}'")


def _runs_of(seq, hin):
    return [TokenRun(m.node_type, m.nodes.copy())
            for m in group_mini_sequences(seq, hin)]


def _seed_token_index(layout, b, s, runs, seed):
    for r, run in enumerate(runs):
        hit = np.flatnonzero(run.ids == seed)
        if len(hit):
            return layout.token_index(b, s, r, int(hit[0]))
    raise DataError(f"seed node {seed} missing from its own sequence")


def _optimizer(params, head_tensors, cfg, total_steps):
    groups = [{"params": head_tensors, "lr_scale": 1.0},
              {"params": list(params.values()),
               "lr_scale": 0.0 if cfg.freeze_encoder else 1.0}]
    return Adam(groups, lr=cfg.lr, total_steps=total_steps)


# ---------------------------------------------------------------------------
# shared embedding extraction
# ---------------------------------------------------------------------------

def node_embeddings(params, model_cfg, hin, sequences, nodes,
                    pool="seed", batch_size=64):
    """(len(nodes), H) array of encoder outputs, no gradient tracking.

    ``sequences`` may be a list of walk sets (node -> sequence each); the
    embeddings are then averaged across sets, which smooths out walk
    sampling noise for the tasks that train nothing.
    """
    if pool not in _POOLS:
        raise ConfigError(f"pool must be one of {_POOLS}, got '{pool}'")
    if (isinstance(sequences, (list, tuple)) and len(sequences) > 0
            and isinstance(sequences[0], (list, tuple, dict))):
        stack = [node_embeddings(params, model_cfg, hin, s, nodes, pool,
                                 batch_size) for s in sequences]
        return np.mean(stack, axis=0)
    out = np.zeros((len(nodes), params["projection"].data.shape[1]))
    for lo in range(0, len(nodes), batch_size):
        chunk = [int(v) for v in nodes[lo:lo + batch_size]]
        runs_per = [_runs_of(sequences[v], hin) for v in chunk]
        examples = [[runs] for runs in runs_per]
        hidden, layout = encode_examples(params, model_cfg, examples)
        for i, v in enumerate(chunk):
            if pool == "seed":
                tok = _seed_token_index(layout, i, 0, runs_per[i], v)
                out[lo + i] = hidden.data[i, tok]
            else:
                # mean over the node tokens, excluding specials
                rows = []
                for r, run in enumerate(runs_per[i]):
                    start = layout.token_index(i, 0, r, 0)
                    rows.append(hidden.data[i, start:start + len(run.ids)])
                out[lo + i] = np.concatenate(rows).mean(axis=0)
    return out


def cosine(a, b):
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine of a zero vector: returning 0", RuntimeWarning)
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def similarity(params, model_cfg, hin, sequences, u, v, pool="seed"):
    """Cosine between the two nodes' output representations, in [-1, 1]."""
    for node in (u, v):
        if not (0 <= node < hin.num_nodes):
            raise DataError(f"node {node} out of range")
    emb = node_embeddings(params, model_cfg, hin, sequences, [u, v], pool)
    return cosine(emb[0], emb[1])


def similarity_matrix(params, model_cfg, hin, sequences, nodes, pool="seed"):
    """All-pairs cosine matrix over ``nodes`` (diagonal = 1)."""
    emb = node_embeddings(params, model_cfg, hin, sequences, nodes, pool)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    zero = norms[:, 0] == 0.0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero embedding vectors in "
                      "similarity matrix", RuntimeWarning)
        norms[zero] = 1.0
    unit = emb / norms
    return np.clip(unit @ unit.T, -1.0, 1.0)


# ---------------------------------------------------------------------------
# link prediction
# ---------------------------------------------------------------------------

@dataclass
class LinkResult:
    head: Tensor                # (H, 2)
    scores: np.ndarray          # P(link) on test pairs
    labels: np.ndarray          # 1 for test positives
    history: list               # per-step training loss


def _undirected_pairs(edges):
    uv = np.sort(edges[:, :2], axis=1)
    return set(map(tuple, uv.tolist()))


def _sample_link_negatives(hin, banned, count, rng):
    n = hin.num_nodes
    out = []
    seen = set()
    tries = 0
    limit = 200 * max(count, 1)
    while len(out) < count and tries < limit:
        tries += 1
        u = int(rng.integers(n))
        v = int(rng.integers(n))
        if u == v:
            continue
        key = (min(u, v), max(u, v))
        if key in banned or key in seen:
            continue
        seen.add(key)
        out.append(key)
    if len(out) < count:
        raise DataError(f"could not sample {count} training negatives "
                        f"(got {len(out)}); graph too dense")
    return out


def _pair_batch_loss(params, model_cfg, hin, sequences, head, pairs, labels):
    examples = [[_runs_of(sequences[u], hin), _runs_of(sequences[v], hin)]
                for u, v in pairs]
    hidden, _ = encode_examples(params, model_cfg, examples)
    cls_h = gather_positions(hidden, [(b, 0) for b in range(len(pairs))])
    logits = ad.matmul(cls_h, head)
    targets = np.zeros((len(pairs), 2))
    targets[np.asarray(labels) == 1, 0] = 1.0
    targets[np.asarray(labels) == 0, 1] = 1.0
    return logits, ad.cross_entropy_with_logits(logits, targets,
                                                reduction="mean")


def link_scores(params, model_cfg, hin, sequences, head, pairs,
                batch_size=64):
    """P(link) per pair from the trained head, batched, no gradients."""
    scores = np.zeros(len(pairs))
    for lo in range(0, len(pairs), batch_size):
        chunk = pairs[lo:lo + batch_size]
        logits, _ = _pair_batch_loss(params, model_cfg, hin, sequences,
                                     head, chunk, [0] * len(chunk))
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        scores[lo:lo + len(chunk)] = (e / e.sum(axis=1, keepdims=True))[:, 0]
    return scores


def finetune_link(params, model_cfg, hin, sequences, split, cfg):
    """Train the 2-way pair head end-to-end; score the held-out pairs.

    Positives are the training edges; negatives are freshly sampled
    non-edges avoiding every test pair. The pair budget is capped at
    cfg.max_pairs (balanced classes).
    """
    rng = np.random.default_rng((cfg.seed, 31))
    pos = sorted(_undirected_pairs(split.train_edges))
    if not pos:
        raise DataError("no training edges to fine-tune on")
    banned = _undirected_pairs(np.asarray(hin.edges))
    banned |= set(map(tuple, np.sort(split.test_pos[:, :2], axis=1).tolist()))
    banned |= set(map(tuple, np.sort(split.test_neg[:, :2], axis=1).tolist()))
    per_class = min(len(pos), cfg.max_pairs // 2)
    if per_class < len(pos):
        keep = rng.choice(len(pos), size=per_class, replace=False)
        pos = [pos[i] for i in sorted(keep)]
    neg = _sample_link_negatives(hin, banned, per_class, rng)
    pairs = np.array(pos + neg)
    labels = np.array([1] * len(pos) + [0] * len(neg))

    head = Tensor(np.random.default_rng((cfg.seed, 37)).normal(
        0.0, math.sqrt(2.0 / (model_cfg.H + 2)), size=(model_cfg.H, 2)),
        requires_grad=True)
    steps_per_epoch = (len(pairs) + cfg.batch_size - 1) // cfg.batch_size
    opt = _optimizer(params, [head], cfg, cfg.epochs * steps_per_epoch)
    history = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng((cfg.seed, 41, epoch)).permutation(
            len(pairs))
        for lo in range(0, len(pairs), cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            with recording():
                _, loss = _pair_batch_loss(params, model_cfg, hin, sequences,
                                           head, pairs[sel], labels[sel])
                loss.backward()
            opt.step()
            opt.zero_grad()
            history.append(float(loss.data))

    test_pairs = np.vstack([split.test_pos[:, :2], split.test_neg[:, :2]])
    test_labels = np.array([1] * len(split.test_pos)
                           + [0] * len(split.test_neg))
    scores = link_scores(params, model_cfg, hin, sequences, head, test_pairs)
    return LinkResult(head=head, scores=scores, labels=test_labels,
                      history=history)


# ---------------------------------------------------------------------------
# node classification
# ---------------------------------------------------------------------------

@dataclass
class ClassifyResult:
    head: Tensor                # (H, K)
    classes: np.ndarray         # label values, row order of the head
    train_nodes: np.ndarray
    test_nodes: np.ndarray
    test_labels: np.ndarray
    pred: np.ndarray            # predicted label values on test nodes
    probs: np.ndarray           # (num_test, K) simplex rows
    history: list


def stratified_split(labels, train_ratio, seed):
    """Per-class shuffled split; every class keeps >= 1 training member.

    Returns (train_idx, test_idx) positions into ``labels``.
    """
    labels = np.asarray(labels)
    train = []
    test = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        order = np.random.default_rng((seed, 23, int(np.searchsorted(
            np.unique(labels), c)))).permutation(len(idx))
        idx = idx[order]
        n_tr = max(1, int(round(train_ratio * len(idx))))
        if n_tr == len(idx) and len(idx) > 1:
            n_tr -= 1
        train.append(idx[:n_tr])
        test.append(idx[n_tr:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def _seed_hidden_batch(params, model_cfg, hin, sequences, nodes):
    """Seed-position output rows for a batch of nodes, gradient-tracked."""
    runs_per = [_runs_of(sequences[int(v)], hin) for v in nodes]
    examples = [[runs] for runs in runs_per]
    hidden, layout = encode_examples(params, model_cfg, examples)
    pairs = [(i, _seed_token_index(layout, i, 0, runs_per[i], int(v)))
             for i, v in enumerate(nodes)]
    return gather_positions(hidden, pairs)


def classify_nodes(params, model_cfg, hin, sequences, labeled_nodes, labels,
                   cfg, train_ratio=0.30):
    """Stratified 30/70 split, softmax head on the seed-position output."""
    labeled_nodes = np.asarray(labeled_nodes)
    labels = np.asarray(labels)
    if len(labeled_nodes) != len(labels):
        raise DataError("labeled_nodes and labels must align")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DataError(f"classification needs >= 2 classes, got "
                        f"{len(classes)}")
    tr_idx, te_idx = stratified_split(labels, train_ratio, cfg.seed)
    missing = np.setdiff1d(classes, np.unique(labels[tr_idx]))
    if len(missing):
        raise DataError(f"classes {missing.tolist()} absent from the "
                        "training split")
    class_index = {c: i for i, c in enumerate(classes)}
    k = len(classes)
    head = Tensor(np.random.default_rng((cfg.seed, 43)).normal(
        0.0, math.sqrt(2.0 / (model_cfg.H + k)), size=(model_cfg.H, k)),
        requires_grad=True)
    train_nodes = labeled_nodes[tr_idx]
    train_y = np.array([class_index[c] for c in labels[tr_idx]])
    steps_per_epoch = (len(train_nodes) + cfg.batch_size - 1) // cfg.batch_size
    opt = _optimizer(params, [head], cfg, cfg.epochs * steps_per_epoch)
    history = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng((cfg.seed, 47, epoch)).permutation(
            len(train_nodes))
        for lo in range(0, len(train_nodes), cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            targets = np.eye(k)[train_y[sel]]
            with recording():
                h = _seed_hidden_batch(params, model_cfg, hin, sequences,
                                       train_nodes[sel])
                logits = ad.matmul(h, head)
                loss = ad.cross_entropy_with_logits(logits, targets,
                                                    reduction="mean")
                loss.backward()
            opt.step()
            opt.zero_grad()
            history.append(float(loss.data))

    test_nodes = labeled_nodes[te_idx]
    probs = np.zeros((len(test_nodes), k))
    for lo in range(0, len(test_nodes), 64):
        chunk = test_nodes[lo:lo + 64]
        h = _seed_hidden_batch(params, model_cfg, hin, sequences, chunk)
        z = h.data @ head.data
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs[lo:lo + len(chunk)] = e / e.sum(axis=1, keepdims=True)
    pred = classes[np.argmax(probs, axis=1)]
    return ClassifyResult(head=head, classes=classes,
                          train_nodes=train_nodes, test_nodes=test_nodes,
                          test_labels=labels[te_idx], pred=pred, probs=probs,
                          history=history)


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------

def kmeans(points, k, seed, tol=1e-6, max_iter=300, n_init=1):
    """k-means++ seeding then Lloyd iterations.

    Returns (assignment, centroids, inertia_history) of the best of
    ``n_init`` restarts by final inertia. Each restart stops when the max
    centroid shift drops below ``tol`` or after ``max_iter`` rounds.
    """
    best = None
    for trial in range(n_init):
        result = _kmeans_once(points, k, (seed, trial, 17), tol, max_iter)
        if best is None or result[2][-1] < best[2][-1]:
            best = result
    return best


def _kmeans_once(points, k, rng_key, tol, max_iter):
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if k < 1 or k > n:
        raise DataError(f"k must be in [1, {n}], got {k}")
    if k > len(np.unique(x, axis=0)):
        raise DataError(f"k={k} exceeds the {len(np.unique(x, axis=0))} "
                        "distinct points")
    rng = np.random.default_rng(rng_key)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total == 0.0:
            centroids[j] = x[rng.integers(n)]
        else:
            centroids[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    history = []
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        history.append(float(dist[np.arange(n), assign].sum()))
        new = centroids.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                # revive an empty cluster at the worst-fit point
                worst = int(dist[np.arange(n), assign].argmax())
                new[j] = x[worst]
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if shift < tol:
            break
    return assign, centroids, np.array(history)


def cluster_nodes(params, model_cfg, hin, sequences, nodes, k, seed,
                  pool="seed"):
    """k-means over unit-normalized output embeddings; adds no parameters.

    Normalizing rows makes euclidean k-means equivalent to clustering by
    cosine, matching how the similarity task reads the same vectors.
    """
    if k < 2:
        raise DataError(f"clustering needs k >= 2, got {k}")
    emb = node_embeddings(params, model_cfg, hin, sequences, nodes, pool)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = emb / np.maximum(norms, 1e-12)
    assign, _, history = kmeans(emb, k, seed, n_init=8)
    return assign, history


# ---------------------------------------------------------------------------
# grid search (opt-in)
# ---------------------------------------------------------------------------

def _clone_params(params):
    return {k: Tensor(v.data.copy(), requires_grad=True)
            for k, v in params.items()}


def grid_search_link(params, model_cfg, hin, sequences, split, base_cfg,
                     grid=None, val_frac=0.10, log=None):
    """Pick (lr, epochs, batch_size) by held-out AUC on 10% of the training
    edges, then retrain the winner on the full training set.

    Cells run sequentially on fresh parameter snapshots so each starts from
    the same checkpoint. Returns (best_cfg, LinkResult, table).
    """
    from .graph import LinkSplit
    grid = grid or LINK_GRID
    pos = np.asarray(split.train_edges)
    rng = np.random.default_rng((base_cfg.seed, 53))
    order = rng.permutation(len(pos))
    n_val = max(1, int(val_frac * len(pos)))
    if n_val >= len(pos):
        raise DataError("too few training edges for a validation split")
    val_pos = pos[order[:n_val]]
    inner_train = pos[order[n_val:]]
    banned = _undirected_pairs(np.asarray(hin.edges))
    banned |= _undirected_pairs(split.test_pos)
    banned |= _undirected_pairs(split.test_neg)
    val_neg = np.array(_sample_link_negatives(hin, banned, len(val_pos),
                                              rng), dtype=np.int64)
    inner = LinkSplit(train_edges=inner_train, test_pos=val_pos,
                      test_neg=val_neg)
    table = []
    best = None
    for lr in grid["lr"]:
        for epochs in grid["epochs"]:
            for batch_size in grid["batch_size"]:
                cell = FinetuneConfig(lr=lr, epochs=epochs,
                                      batch_size=batch_size,
                                      max_pairs=base_cfg.max_pairs,
                                      freeze_encoder=base_cfg.freeze_encoder,
                                      pool=base_cfg.pool, seed=base_cfg.seed)
                snap = _clone_params(params)
                res = finetune_link(snap, model_cfg, hin, sequences, inner,
                                    cell)
                from .metrics import roc_auc
                auc = roc_auc(res.scores, res.labels)
                table.append((lr, epochs, batch_size, auc))
                if log is not None:
                    log(f"grid lr={lr} epochs={epochs} "
                        f"batch={batch_size} val_auc={auc:.4f}")
                if best is None or auc > best[3]:
                    best = (lr, epochs, batch_size, auc)
    best_cfg = FinetuneConfig(lr=best[0], epochs=best[1],
                              batch_size=best[2],
                              max_pairs=base_cfg.max_pairs,
                              freeze_encoder=base_cfg.freeze_encoder,
                              pool=base_cfg.pool, seed=base_cfg.seed)
    result = finetune_link(params, model_cfg, hin, sequences, split,
                           best_cfg)
    return best_cfg, result, table
