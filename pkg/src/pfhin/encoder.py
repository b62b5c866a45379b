"""Model stack: factorized embeddings, per-type Bi-LSTM, shared transformer.

Token flow for one assembled example::

    [CLS] run run ... [SEP] (run ... [SEP])      runs = type mini-sequences

Node tokens gather Q-dim rows from the factorized node table (or the MASK
row when corrupted), pass through their type's Bi-LSTM in mini-sequence
order, and enter the transformer as (h_fwd + h_bwd) @ projection, which
equals concatenating the halves and multiplying a vertically stacked
projection: no parameters beyond the factorized pair.  CLS/SEP rows project
directly.  Position ids are the within-example token order, segments mark
the two walk sequences of a pair.

One transformer layer exists; depth L reapplies it, so its parameter count
is independent of L.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, ShapeError

CLS, SEP, MASK = 0, 1, 2            # special_table rows
MASK_ID = -1                        # in-run marker for a masked slot
NEG_BIAS = -1e30

_LSTM_MATS = ("wx_j", "wh_j", "wc_j", "wx_f", "wh_f", "wc_f",
              "wx_z", "wh_z", "wx_o", "wh_o", "wc_o")
_LSTM_BIASES = ("b_j", "b_f", "b_z", "b_o")


@dataclass(frozen=True)
class ModelConfig:
    V: int                  # node vocabulary size
    num_types: int
    Q: int = 16             # factorized embedding width
    H: int = 64             # transformer hidden width
    A: int = 4              # attention heads
    L: int = 2              # shared-layer applications
    d: int = 32             # Bi-LSTM output width (= 2Q)
    max_len: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        if min(self.V, self.num_types, self.Q, self.H, self.A, self.L) < 1:
            raise ConfigError("V, num_types, Q, H, A, L must all be >= 1")
        if self.H % self.A != 0:
            raise ConfigError(f"heads must divide hidden width, got H={self.H} A={self.A}")
        if self.d != 2 * self.Q:
            raise ConfigError(
                f"d must equal 2Q (forward/backward halves of width Q "
                f"concatenate to d), got d={self.d} Q={self.Q}")
        if self.max_len < 3:
            raise ConfigError(f"max_len must be >= 3, got {self.max_len}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must be in [0,1), got {self.dropout}")


def param_spec(cfg):
    """name -> shape for every model parameter."""
    q, h = cfg.Q, cfg.H
    spec = {
        "node_table": (cfg.V, q),
        "special_table": (3, q),
        "projection": (q, h),
        "position_table": (cfg.max_len, h),
        "segment_table": (2, h),
    }
    for t in range(cfg.num_types):
        for dr in ("fwd", "bwd"):
            for m in _LSTM_MATS:
                spec[f"lstm{t}.{dr}.{m}"] = (q, q)
            for b in _LSTM_BIASES:
                spec[f"lstm{t}.{dr}.{b}"] = (q,)
    for m in ("wq", "wk", "wv", "wo"):
        spec[f"tr.{m}"] = (h, h)
    for b in ("bq", "bk", "bv", "bo"):
        spec[f"tr.{b}"] = (h,)
    spec["tr.w1"] = (h, 4 * h)
    spec["tr.b1"] = (4 * h,)
    spec["tr.w2"] = (4 * h, h)
    spec["tr.b2"] = (h,)
    for n in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
        spec[f"tr.{n}"] = (h,)
    return spec


def init_params(cfg, seed):
    """Fan-aware Gaussian weights, zero biases, unit layer-norm gains.

    Embedding tables draw at unit scale so the recurrent gates operate in
    their active range from the first step; matrices use Glorot variance
    2/(fan_in+fan_out). Position and segment tables start small so content
    dominates the token sum early on.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_spec(cfg).items():
        base = name.rsplit(".", 1)[-1]
        if base in ("ln1_g", "ln2_g"):
            data = np.ones(shape)
        elif base.startswith("b") or base in ("ln1_b", "ln2_b"):
            data = np.zeros(shape)
        elif name in ("node_table", "special_table"):
            data = rng.normal(0.0, 1.0, size=shape)
        elif name in ("position_table", "segment_table"):
            data = rng.normal(0.0, 0.1, size=shape)
        else:
            std = math.sqrt(2.0 / (shape[0] + shape[1]))
            data = rng.normal(0.0, std, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def param_count(params):
    return sum(p.data.size for p in params.values())


def closed_form_count(cfg):
    """Per-piece parameter formulas summed for the configuration."""
    q, h = cfg.Q, cfg.H
    emb = cfg.V * q + 3 * q + q * h + cfg.max_len * h + 2 * h
    lstm = cfg.num_types * 2 * (11 * q * q + 4 * q)
    attn = 4 * (h * h + h)
    ff = (h * 4 * h + 4 * h) + (4 * h * h + h)
    norms = 4 * h
    return emb + lstm + attn + ff + norms


def save_params(params, path, config=None):
    save_checkpoint(path, params, config=config)


def load_params(path, cfg=None):
    """Load a checkpoint into Tensors; validates shapes when cfg given."""
    arrays, config = load_checkpoint(path)
    if cfg is not None:
        spec = param_spec(cfg)
        missing = sorted(set(spec) - set(arrays))
        if missing:
            raise DataError(f"checkpoint missing parameters: {missing[:5]}")
        for name, shape in spec.items():
            if arrays[name].shape != shape:
                raise DataError(f"checkpoint parameter '{name}' has shape "
                                f"{arrays[name].shape}, expected {shape}")
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    return params, config


# ---------------------------------------------------------------------------
# Bi-LSTM
# ---------------------------------------------------------------------------

def _lstm_direction(params, prefix, x_steps, masks):
    """One direction over precut steps; masks freeze state at padded slots.

    x_steps: list of (N, Q) Tensors in processing order.
    masks:   list of (N, Q) 0/1 float arrays, same order.
    Returns the per-step hidden states, same order.
    """
    p = {k: params[prefix + k] for k in _LSTM_MATS + _LSTM_BIASES}
    n = x_steps[0].data.shape[0]
    q = x_steps[0].data.shape[1]
    h = Tensor(np.zeros((n, q)))
    c = Tensor(np.zeros((n, q)))
    outs = []
    for x, m in zip(x_steps, masks):
        j = ad.sigmoid(ad.add(ad.add(ad.add(
            ad.matmul(x, p["wx_j"]), ad.matmul(h, p["wh_j"])),
            ad.matmul(c, p["wc_j"])), p["b_j"]))
        f = ad.sigmoid(ad.add(ad.add(ad.add(
            ad.matmul(x, p["wx_f"]), ad.matmul(h, p["wh_f"])),
            ad.matmul(c, p["wc_f"])), p["b_f"]))
        z = ad.tanh(ad.add(ad.add(
            ad.matmul(x, p["wx_z"]), ad.matmul(h, p["wh_z"])), p["b_z"]))
        c_new = ad.add(ad.mul(f, c), ad.mul(j, z))
        o = ad.sigmoid(ad.add(ad.add(ad.add(
            ad.matmul(x, p["wx_o"]), ad.matmul(h, p["wh_o"])),
            ad.matmul(c_new, p["wc_o"])), p["b_o"]))
        h_new = ad.mul(o, ad.tanh(c_new))
        if m is None:
            h, c = h_new, c_new
        else:
            inv = 1.0 - m
            h = ad.add(ad.mul(h_new, m), ad.mul(h, inv))
            c = ad.add(ad.mul(c_new, m), ad.mul(c, inv))
        outs.append(h)
    return outs


def run_bilstm_batch(params, type_id, x, valid=None):
    """Both directions over x (N, T, Q); returns (h_fwd, h_bwd) as (N, T, Q).

    ``valid`` is an (N, T) 0/1 array; padded steps keep the previous state,
    and their emitted rows are never read downstream.
    """
    n, t, q = x.data.shape
    steps = [ad.reshape(ad.slice_axis(x, 1, i, i + 1), (n, q))
             for i in range(t)]
    if valid is None:
        masks = [None] * t
    else:
        masks = [np.repeat(valid[:, i:i + 1].astype(np.float64), q, axis=1)
                 for i in range(t)]
    fwd = _lstm_direction(params, f"lstm{type_id}.fwd.", steps, masks)
    bwd = _lstm_direction(params, f"lstm{type_id}.bwd.", steps[::-1],
                          masks[::-1])[::-1]
    h_f = ad.concat([ad.reshape(s, (n, 1, q)) for s in fwd], axis=1)
    h_b = ad.concat([ad.reshape(s, (n, 1, q)) for s in bwd], axis=1)
    return h_f, h_b


def bilstm_encode(params, type_id, rows):
    """One mini-sequence of feature rows (T, Q) -> (T, 2Q) hidden states:
    forward and backward halves concatenated."""
    rows = rows if isinstance(rows, Tensor) else Tensor(rows)
    if rows.data.ndim != 2 or rows.data.shape[0] == 0:
        raise DataError(f"bilstm_encode needs a nonempty (T, Q) input, "
                        f"got shape {rows.data.shape}")
    t, q = rows.data.shape
    x = ad.reshape(rows, (1, t, q))
    h_f, h_b = run_bilstm_batch(params, type_id, x)
    out = ad.concat([h_f, h_b], axis=2)
    return ad.reshape(out, (t, 2 * q))


# ---------------------------------------------------------------------------
# plain embedding path (no LSTM), kept for direct use and tests
# ---------------------------------------------------------------------------

def embed_tokens(params, token_ids, positions, segments):
    """Factorized lookup: gather Q rows, project to H, add position and
    segment embeddings.  All index arrays share one shape."""
    token_ids = np.asarray(token_ids)
    content = ad.matmul(ad.embedding_gather(params["node_table"], token_ids),
                        params["projection"])
    pos = ad.embedding_gather(params["position_table"], np.asarray(positions))
    seg = ad.embedding_gather(params["segment_table"], np.asarray(segments))
    return ad.add(ad.add(content, pos), seg)


# ---------------------------------------------------------------------------
# shared transformer
# ---------------------------------------------------------------------------

def transformer_encode(params, cfg, x, valid=None, training=False, rng=None):
    """Apply the one shared post-norm layer L times.

    x: (B, L_tok, H) Tensor; valid: (B, L_tok) 0/1 array or None.
    """
    b, lt, h = x.data.shape
    if lt > cfg.max_len:
        raise ShapeError(f"sequence length {lt} overflows max_len {cfg.max_len}")
    if h != cfg.H:
        raise ShapeError(f"hidden width {h} does not match H={cfg.H}")
    a, dh = cfg.A, cfg.H // cfg.A
    if valid is None:
        bias = None
    else:
        col = np.where(valid[:, None, None, :] > 0, 0.0, NEG_BIAS)
        bias = np.broadcast_to(col, (b, a, lt, lt))
    scale = 1.0 / np.sqrt(dh)
    drop = cfg.dropout if training else 0.0
    if drop > 0.0 and rng is None:
        raise ConfigError("training-mode transformer needs an rng for dropout")

    def heads(name):
        y = ad.add(ad.matmul(x, params[f"tr.w{name}"]), params[f"tr.b{name}"])
        return ad.transpose(ad.reshape(y, (b, lt, a, dh)), (0, 2, 1, 3))

    for _ in range(cfg.L):
        q = heads("q")
        k = heads("k")
        v = heads("v")
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale)
        if bias is not None:
            scores = ad.add(scores, bias)
        att = ad.softmax(scores)
        att = ad.dropout(att, drop, rng, training)
        ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)),
                         (b, lt, cfg.H))
        proj = ad.add(ad.matmul(ctx, params["tr.wo"]), params["tr.bo"])
        proj = ad.dropout(proj, drop, rng, training)
        x = ad.layer_norm(ad.add(x, proj), params["tr.ln1_g"], params["tr.ln1_b"])
        inner = ad.gelu(ad.add(ad.matmul(x, params["tr.w1"]), params["tr.b1"]))
        ff = ad.add(ad.matmul(inner, params["tr.w2"]), params["tr.b2"])
        ff = ad.dropout(ff, drop, rng, training)
        x = ad.layer_norm(ad.add(x, ff), params["tr.ln2_g"], params["tr.ln2_b"])
    return x


# ---------------------------------------------------------------------------
# batch assembly: mini-sequence runs -> transformer token grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TokenRun:
    """One mini-sequence as model input; ids are node ids, MASK_ID for a
    masked slot."""
    node_type: int
    ids: np.ndarray


@dataclass(frozen=True)
class BatchLayout:
    lengths: np.ndarray          # (B,) token count per example
    valid: np.ndarray            # (B, Lmax) 0/1 float
    positions: np.ndarray        # (B, Lmax) int64
    segments: np.ndarray         # (B, Lmax) int64
    run_start: tuple             # [b][s][r] -> token index of run's first node
    max_len: int

    def token_index(self, b, s, r, offset):
        return self.run_start[b][s][r] + offset


def _example_length(example):
    total = 1  # CLS
    for seg in example:
        total += sum(len(run.ids) for run in seg) + 1  # runs + SEP
    return total


def encode_examples(params, cfg, examples, training=False, rng=None):
    """Full forward pass for a batch of examples.

    Each example is a list of 1 or 2 segments; a segment is a list of
    TokenRun.  Returns (hidden (B, Lmax, H) Tensor, BatchLayout).
    """
    if not examples:
        raise DataError("empty batch")
    b = len(examples)
    lengths = np.array([_example_length(e) for e in examples], dtype=np.int64)
    lmax = int(lengths.max())
    if lmax > cfg.max_len:
        raise ShapeError(f"assembled length {lmax} overflows max_len {cfg.max_len}")

    # bucket runs by node type for one batched Bi-LSTM call per type
    buckets = {}
    for bi, example in enumerate(examples):
        if not (1 <= len(example) <= 2):
            raise DataError(f"example {bi}: need 1 or 2 segments, got {len(example)}")
        for si, seg in enumerate(example):
            for ri, run in enumerate(seg):
                if len(run.ids) == 0:
                    raise DataError(f"example {bi}: empty run")
                buckets.setdefault(run.node_type, []).append((bi, si, ri, run.ids))

    node_table = params["node_table"]
    special_table = params["special_table"]
    pool_parts = []
    pool_offsets = {}
    offset = 0
    for t in sorted(buckets):
        runs = buckets[t]
        nt = len(runs)
        tt = max(len(ids) for _, _, _, ids in runs)
        ids_mat = np.zeros((nt, tt), dtype=np.int64)
        is_mask = np.zeros((nt, tt), dtype=np.float64)
        valid = np.zeros((nt, tt), dtype=np.float64)
        for row, (_, _, _, ids) in enumerate(runs):
            ln = len(ids)
            valid[row, :ln] = 1.0
            ids_arr = np.asarray(ids, dtype=np.int64)
            masked = ids_arr == MASK_ID
            is_mask[row, :ln] = masked
            ids_mat[row, :ln] = np.where(masked, 0, ids_arr)
        node_rows = ad.embedding_gather(node_table, ids_mat)
        mask_rows = ad.embedding_gather(
            special_table, np.full((nt, tt), MASK, dtype=np.int64))
        m3 = np.repeat(is_mask[:, :, None], cfg.Q, axis=2)
        v3 = np.repeat(valid[:, :, None], cfg.Q, axis=2)
        x = ad.mul(ad.add(ad.mul(node_rows, 1.0 - m3), ad.mul(mask_rows, m3)), v3)
        h_f, h_b = run_bilstm_batch(params, t, x, valid)
        content = ad.reshape(ad.add(h_f, h_b), (nt * tt, cfg.Q))
        pool_parts.append(content)
        pool_offsets[t] = (offset, tt)
        offset += nt * tt
    pool_parts.append(special_table)
    special_offset = offset
    pool_h = ad.matmul(ad.concat(pool_parts, axis=0), params["projection"])

    # map every token position to its pool row
    flat_idx = np.zeros((b, lmax), dtype=np.int64)
    positions = np.zeros((b, lmax), dtype=np.int64)
    segments = np.zeros((b, lmax), dtype=np.int64)
    valid_bl = np.zeros((b, lmax), dtype=np.float64)
    run_local = {}  # (b, s, r) -> bucket row
    for t, runs in buckets.items():
        for row, (bi, si, ri, _) in enumerate(runs):
            run_local[(bi, si, ri)] = (t, row)
    run_start = []
    for bi, example in enumerate(examples):
        starts_b = []
        cursor = 0
        flat_idx[bi, cursor] = special_offset + CLS
        segments[bi, cursor] = 0
        cursor += 1
        for si, seg in enumerate(example):
            starts_s = []
            for ri, run in enumerate(seg):
                starts_s.append(cursor)
                t, row = run_local[(bi, si, ri)]
                off, tt = pool_offsets[t]
                for k in range(len(run.ids)):
                    flat_idx[bi, cursor] = off + row * tt + k
                    segments[bi, cursor] = si
                    cursor += 1
            flat_idx[bi, cursor] = special_offset + SEP
            segments[bi, cursor] = si
            cursor += 1
            starts_b.append(tuple(starts_s))
        run_start.append(tuple(starts_b))
        valid_bl[bi, :cursor] = 1.0
        positions[bi, :] = np.arange(lmax)

    content = ad.embedding_gather(pool_h, flat_idx)
    pos_emb = ad.embedding_gather(params["position_table"], positions)
    seg_emb = ad.embedding_gather(params["segment_table"], segments)
    v_full = np.repeat(valid_bl[:, :, None], cfg.H, axis=2)
    states = ad.mul(ad.add(ad.add(content, pos_emb), seg_emb), v_full)
    states = ad.dropout(states, cfg.dropout if training else 0.0, rng, training)
    hidden = transformer_encode(params, cfg, states, valid_bl,
                                training=training, rng=rng)
    layout = BatchLayout(lengths=lengths, valid=valid_bl, positions=positions,
                         segments=segments, run_start=tuple(run_start),
                         max_len=lmax)
    return hidden, layout


def gather_positions(hidden, pairs):
    """Hidden rows at (example, token) pairs -> (len(pairs), H) Tensor."""
    b, lmax, h = hidden.data.shape
    flat = ad.reshape(hidden, (b * lmax, h))
    idx = np.array([bi * lmax + li for bi, li in pairs], dtype=np.int64)
    return ad.embedding_gather(flat, idx)
