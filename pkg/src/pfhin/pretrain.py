"""Self-supervised pretraining: masked node prediction on mini-sequences
plus adjacency prediction on sequence pairs.

Per training example one node's walk sequence is paired with a neighbor's
(label 1) or a non-neighbor's (label 0), both sequences are corrupted by the
masking rule, and the model is trained on mean masked-node loss plus mean
pair loss.  The masked-node classifier is tied to the input embedding table:
scores for a masked slot of type t are dot products against the node-table
rows of type t, so no separate output matrix exists.
"""

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, recording
from .checkpoint import save_checkpoint
from .encoder import (MASK_ID, ModelConfig, TokenRun, encode_examples,
                      gather_positions, init_params, param_spec)
from .errors import ConfigError, NumericError
from .walker import group_mini_sequences, sample_sequence


@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 256
    epochs: int = 20
    lr: float = 0.001
    mask_rate: float = 0.15
    pos_rate: float = 0.5       # fraction of adjacent (positive) pairs
    smoothing: float = 0.9      # label mass on the true node
    seed: int = 0

    def __post_init__(self):
        for name in ("mask_rate", "pos_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0,1], got {v}")
        if not (0.0 < self.smoothing <= 1.0):
            raise ConfigError(f"smoothing must be in (0,1], got {self.smoothing}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")


def head_spec(cfg):
    return {"mnm_ff_w": (cfg.H, cfg.Q), "mnm_ff_b": (cfg.Q,),
            "anp_w": (cfg.H, 2)}


def init_heads(cfg, seed):
    # heads start near zero so both losses open at their uniform values
    # (log V^t and log 2) with well-scaled gradients
    rng = np.random.default_rng(seed)
    heads = {}
    for name, shape in head_spec(cfg).items():
        data = np.zeros(shape) if name.endswith("_b") \
            else rng.normal(0.0, 0.02, size=shape)
        heads[name] = Tensor(data, requires_grad=True)
    return heads


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

def mask_count(n, rate):
    """Exact per-mini-sequence count: round-half-up of rate*n, at least 1
    (zero only when the rate itself is zero)."""
    if rate == 0.0:
        return 0
    return max(1, int(rate * n + 0.5))


def mask_mini_sequence(mini, hin, rng, rate=0.15):
    """Corrupt one mini-sequence.

    Returns (input_ids, positions, true_ids): input_ids has MASK_ID where the
    [MASK] row substitutes, a same-type impostor for 10% of selections, and
    the original id for the rest.
    """
    nodes = np.asarray(mini.nodes, dtype=np.int64)
    n = len(nodes)
    count = mask_count(n, rate)
    input_ids = nodes.copy()
    if count == 0:
        return input_ids, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    positions = np.sort(rng.choice(n, size=count, replace=False))
    pool = np.flatnonzero(hin.node_type == mini.node_type)
    for p in positions:
        r = rng.random()
        if r < 0.8:
            input_ids[p] = MASK_ID
        elif r < 0.9 and len(pool) > 1:
            # uniform over same-type nodes excluding the original
            j = int(rng.integers(len(pool) - 1))
            repl = pool[j]
            if repl == nodes[p]:
                repl = pool[-1]
            input_ids[p] = repl
        # else unchanged
    return input_ids, positions, nodes[positions]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def smoothed_labels(v_t, target_index, eps):
    """Length-v_t row: eps on the target, the rest shared uniformly."""
    if v_t < 2:
        raise ConfigError(f"smoothed label needs vocabulary >= 2, got {v_t}")
    y = np.full(v_t, (1.0 - eps) / (v_t - 1), dtype=np.float64)
    y[target_index] = eps
    return y


def mnm_loss(params, heads, hidden, layout, slots, hin, eps=0.9):
    """Mean smoothed cross-entropy over all masked slots.

    ``slots`` rows are (example, segment, run, offset, true_node, node_type).
    Slots whose type has a single-node vocabulary are skipped with a warning.
    """
    usable = []
    for slot in slots:
        t = slot[5]
        if len(hin.nodes_of_type(t)) < 2:
            warnings.warn(f"masked slot of type '{hin.node_types[t]}' skipped: "
                          "single-node vocabulary", RuntimeWarning)
            continue
        usable.append(slot)
    if not usable:
        return Tensor(0.0)
    total = None
    by_type = {}
    for slot in usable:
        by_type.setdefault(slot[5], []).append(slot)
    m_total = len(usable)
    for t, rows in sorted(by_type.items()):
        pairs = [(b, layout.token_index(b, s, r, off))
                 for b, s, r, off, _, _ in rows]
        h = gather_positions(hidden, pairs)
        z = ad.add(ad.matmul(h, heads["mnm_ff_w"]), heads["mnm_ff_b"])
        pool = hin.nodes_of_type(t)
        tied = ad.embedding_gather(params["node_table"], pool)
        logits = ad.matmul(z, ad.transpose(tied, (1, 0)))
        targets = np.stack([
            smoothed_labels(len(pool),
                            int(np.searchsorted(pool, true)), eps)
            for _, _, _, _, true, _ in rows])
        part = ad.cross_entropy_with_logits(logits, targets, reduction="sum")
        total = part if total is None else ad.add(total, part)
    return ad.mul(total, 1.0 / m_total)


def anp_scores(heads, c_hidden):
    """Two-way scores per example; rows sum to 1."""
    return ad.softmax(ad.matmul(c_hidden, heads["anp_w"]))


def anp_loss(heads, c_hidden, labels):
    """-[y log s0 + (1-y) log s1] batch-meaned; label 1 = adjacent pair."""
    labels = np.asarray(labels, dtype=np.int64)
    logits = ad.matmul(c_hidden, heads["anp_w"])
    targets = np.zeros((len(labels), 2), dtype=np.float64)
    targets[labels == 1, 0] = 1.0
    targets[labels == 0, 1] = 1.0
    return ad.cross_entropy_with_logits(logits, targets, reduction="mean")


# ---------------------------------------------------------------------------
# pair construction
# ---------------------------------------------------------------------------

def sample_partner(hin, u, rng, pos_rate=0.5):
    """Choose (v, label): a neighbor with probability pos_rate, otherwise a
    uniform non-neighbor.  An isolated u warns and yields a negative."""
    row = hin.indices[hin.indptr[u]:hin.indptr[u + 1]]
    want_pos = rng.random() < pos_rate
    if want_pos and len(row) == 0:
        warnings.warn(f"node {u} is isolated: emitting a negative pair",
                      RuntimeWarning)
        want_pos = False
    if want_pos:
        return int(row[rng.integers(len(row))]), 1
    banned = set(row.tolist())
    banned.add(u)
    n = hin.num_nodes
    if len(banned) >= n:
        warnings.warn(f"node {u} neighbors the whole graph: emitting a "
                      "positive pair instead", RuntimeWarning)
        return int(row[rng.integers(len(row))]), 1
    for _ in range(200):
        v = int(rng.integers(n))
        if v not in banned:
            return v, 0
    pool = np.setdiff1d(np.arange(n), np.fromiter(banned, dtype=np.int64))
    return int(pool[rng.integers(len(pool))]), 0


def make_anp_pair(hin, sequences, u, rng, pos_rate=0.5):
    """(seq_u, seq_v, label) using precomputed walk sequences."""
    v, label = sample_partner(hin, u, rng, pos_rate)
    return sequences[u], sequences[v], label


def build_pretrain_batch(hin, sequences, nodes, rng, mask_rate=0.15,
                         pos_rate=0.5):
    """Assemble examples plus masked-slot records for a batch of seed nodes.

    Returns (examples, slots, labels); slots rows are
    (example, segment, run, offset, true_node, node_type).
    """
    examples = []
    slots = []
    labels = []
    for b, u in enumerate(nodes):
        seq_u, seq_v, label = make_anp_pair(hin, sequences, int(u), rng,
                                            pos_rate)
        segs = []
        for s, seq in enumerate((seq_u, seq_v)):
            runs = []
            for r, mini in enumerate(group_mini_sequences(seq, hin)):
                ids, positions, true_ids = mask_mini_sequence(
                    mini, hin, rng, mask_rate)
                runs.append(TokenRun(mini.node_type, ids))
                for p, true in zip(positions, true_ids):
                    slots.append((b, s, r, int(p), int(true), mini.node_type))
            segs.append(runs)
        examples.append(segs)
        labels.append(label)
    return examples, slots, np.asarray(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def pretrain_step(params, heads, model_cfg, hin, examples, slots, labels,
                  eps, rng):
    """Forward both objectives; returns (total, mnm, anp) scalar Tensors."""
    hidden, layout = encode_examples(params, model_cfg, examples,
                                     training=True, rng=rng)
    mnm = mnm_loss(params, heads, hidden, layout, slots, hin, eps=eps)
    cls_h = gather_positions(hidden, [(b, 0) for b in range(len(examples))])
    anp = anp_loss(heads, cls_h, labels)
    return ad.add(mnm, anp), mnm, anp


def run_pretrain(hin, ranking, model_cfg, walk_cfg, pre_cfg, out_path=None,
                 loss_csv_path=None, log=None):
    """One pair per node per epoch; walks resampled each epoch.

    Fresh walks per epoch give each node many co-occurrence views at a
    fixed epoch budget.  Returns (params, heads, history); history rows
    are (step, mnm, anp, total).  Writes the checkpoint and loss curve
    when paths are given.
    """
    n = hin.num_nodes
    params = init_params(model_cfg, pre_cfg.seed)
    heads = init_heads(model_cfg, pre_cfg.seed + 1)
    trainable = list(params.values()) + list(heads.values())
    steps_per_epoch = (n + pre_cfg.batch_size - 1) // pre_cfg.batch_size
    total_steps = pre_cfg.epochs * steps_per_epoch
    opt = Adam(trainable, lr=pre_cfg.lr, total_steps=total_steps)
    history = []
    step = 0
    for epoch in range(pre_cfg.epochs):
        walk_seed = pre_cfg.seed * 1000003 + epoch
        sequences = [sample_sequence(hin, ranking, v, walk_cfg, walk_seed)
                     for v in range(n)]
        order_rng = np.random.default_rng((pre_cfg.seed, 7, epoch))
        order = order_rng.permutation(n)
        for lo in range(0, n, pre_cfg.batch_size):
            nodes = order[lo:lo + pre_cfg.batch_size]
            batch_rng = np.random.default_rng((pre_cfg.seed, 11, step))
            examples, slots, labels = build_pretrain_batch(
                hin, sequences, nodes, batch_rng,
                mask_rate=pre_cfg.mask_rate, pos_rate=pre_cfg.pos_rate)
            drop_rng = np.random.default_rng((pre_cfg.seed, 13, step))
            with recording():
                total, mnm, anp = pretrain_step(
                    params, heads, model_cfg, hin, examples, slots, labels,
                    pre_cfg.smoothing, drop_rng)
                if not np.isfinite(total.data):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} step {step}: "
                        f"mnm={float(mnm.data)} anp={float(anp.data)} "
                        f"batch nodes={nodes[:16].tolist()}...")
                total.backward()
            opt.step()
            opt.zero_grad()
            history.append((step, float(mnm.data), float(anp.data),
                            float(total.data)))
            if log is not None:
                log(f"epoch {epoch} step {step} "
                    f"mnm {float(mnm.data):.4f} anp {float(anp.data):.4f} "
                    f"total {float(total.data):.4f}")
            step += 1
    if loss_csv_path is not None:
        with open(loss_csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "mnm_loss", "anp_loss", "total"])
            w.writerows(history)
    if out_path is not None:
        named = dict(params)
        named.update(heads)
        save_checkpoint(out_path, named, config=None)
    return params, heads, history
