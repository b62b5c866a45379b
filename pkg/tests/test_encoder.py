import numpy as np
import pytest
from scipy.special import erf, expit

import pfhin.autodiff as ad
from pfhin.autodiff import Tensor, backward, recording, sum_all
from pfhin.encoder import (BatchLayout, ModelConfig, TokenRun, bilstm_encode,
                           closed_form_count, embed_tokens, encode_examples,
                           gather_positions, init_params, load_params,
                           param_count, param_spec, run_bilstm_batch,
                           save_params, transformer_encode)
from pfhin.errors import ConfigError, DataError, ShapeError

CFG = ModelConfig(V=12, num_types=2, Q=4, H=8, A=2, L=2, d=8, max_len=16,
                  dropout=0.1)


def tiny_params(seed=0):
    return init_params(CFG, seed)


# ---------------------------------------------------------------------------
# config and parameter accounting
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError, match="2Q"):
        ModelConfig(V=5, num_types=1, Q=4, H=8, A=2, L=1, d=9)
    with pytest.raises(ConfigError, match="divide"):
        ModelConfig(V=5, num_types=1, Q=4, H=10, A=4, L=1, d=8)
    with pytest.raises(ConfigError):
        ModelConfig(V=0, num_types=1)


def test_param_count_matches_closed_form():
    for cfg in (CFG,
                ModelConfig(V=50, num_types=3, Q=8, H=16, A=4, L=1, d=16),
                ModelConfig(V=1000, num_types=4, Q=16, H=64, A=4, L=2, d=32,
                            max_len=48)):
        params = init_params(cfg, 0)
        assert param_count(params) == closed_form_count(cfg)


def test_depth_does_not_change_count():
    c1 = ModelConfig(V=20, num_types=2, Q=4, H=8, A=2, L=1, d=8)
    c2 = ModelConfig(V=20, num_types=2, Q=4, H=8, A=2, L=5, d=8)
    assert closed_form_count(c1) == closed_form_count(c2)
    assert param_count(init_params(c1, 1)) == param_count(init_params(c2, 1))


def test_factorization_beats_full_table():
    v, q, h = 1000, 16, 64
    factorized = v * q + q * h
    assert factorized == 17024
    assert factorized < v * h
    assert q < v * h / (v + h)


# ---------------------------------------------------------------------------
# Bi-LSTM
# ---------------------------------------------------------------------------

def test_zero_params_give_zero_outputs():
    params = tiny_params()
    for name, p in params.items():
        if name.startswith("lstm0."):
            p.data[...] = 0.0
    rows = np.random.default_rng(0).standard_normal((5, CFG.Q))
    out = bilstm_encode(params, 0, rows)
    np.testing.assert_array_equal(out.data, np.zeros((5, CFG.d)))


def test_length_one_directions_agree():
    params = tiny_params(3)
    # copy forward params onto backward so both directions are identical
    for m in list(params):
        if ".fwd." in m and m.startswith("lstm0"):
            params[m.replace(".fwd.", ".bwd.")] = Tensor(
                params[m].data.copy(), requires_grad=True)
    rows = np.random.default_rng(1).standard_normal((1, CFG.Q))
    out = bilstm_encode(params, 0, rows).data
    np.testing.assert_allclose(out[0, :CFG.Q], out[0, CFG.Q:], rtol=1e-12)


def _ref_lstm_dir(params, prefix, xs):
    """Independent step-by-step recurrence of the six gate equations."""
    g = lambda n: params[prefix + n].data
    q = xs.shape[1]
    h = np.zeros(q)
    c = np.zeros(q)
    outs = []
    for x in xs:
        j = expit(x @ g("wx_j") + h @ g("wh_j") + c @ g("wc_j") + g("b_j"))
        f = expit(x @ g("wx_f") + h @ g("wh_f") + c @ g("wc_f") + g("b_f"))
        z = np.tanh(x @ g("wx_z") + h @ g("wh_z") + g("b_z"))
        c = f * c + j * z
        o = expit(x @ g("wx_o") + h @ g("wh_o") + c @ g("wc_o") + g("b_o"))
        h = o * np.tanh(c)
        outs.append(h)
    return np.asarray(outs)


def _ref_bilstm(params, t, xs):
    fwd = _ref_lstm_dir(params, f"lstm{t}.fwd.", xs)
    bwd = _ref_lstm_dir(params, f"lstm{t}.bwd.", xs[::-1])[::-1]
    return np.concatenate([fwd, bwd], axis=1)


def test_bilstm_matches_scalar_recurrence():
    params = tiny_params(7)
    xs = np.random.default_rng(2).standard_normal((3, CFG.Q))
    out = bilstm_encode(params, 1, xs).data
    np.testing.assert_allclose(out, _ref_bilstm(params, 1, xs), rtol=1e-12)


def test_bilstm_reverse_swap_equivariance():
    params = tiny_params(9)
    swapped = dict(params)
    for m in list(params):
        if m.startswith("lstm0.fwd."):
            swapped[m] = params[m.replace(".fwd.", ".bwd.")]
            swapped[m.replace(".fwd.", ".bwd.")] = params[m]
    xs = np.random.default_rng(3).standard_normal((6, CFG.Q))
    out1 = bilstm_encode(params, 0, xs).data
    out2 = bilstm_encode(swapped, 0, xs[::-1]).data
    q = CFG.Q
    np.testing.assert_allclose(np.flip(out2[:, :q], 0), out1[:, q:], rtol=1e-12)
    np.testing.assert_allclose(np.flip(out2[:, q:], 0), out1[:, :q], rtol=1e-12)


def test_batched_padding_equals_individual():
    params = tiny_params(11)
    rng = np.random.default_rng(4)
    seq_a = rng.standard_normal((3, CFG.Q))
    seq_b = rng.standard_normal((5, CFG.Q))
    x = np.zeros((2, 5, CFG.Q))
    x[0, :3] = seq_a
    x[1] = seq_b
    valid = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=np.float64)
    h_f, h_b = run_bilstm_batch(params, 0, Tensor(x), valid)
    got = np.concatenate([h_f.data, h_b.data], axis=2)
    np.testing.assert_allclose(got[0, :3], _ref_bilstm(params, 0, seq_a),
                               rtol=1e-11)
    np.testing.assert_allclose(got[1], _ref_bilstm(params, 0, seq_b),
                               rtol=1e-11)


def test_bilstm_empty_errors():
    with pytest.raises(DataError, match="nonempty"):
        bilstm_encode(tiny_params(), 0, np.zeros((0, CFG.Q)))


# ---------------------------------------------------------------------------
# embedding path
# ---------------------------------------------------------------------------

def test_embed_tokens_position_additivity():
    params = tiny_params(13)
    out = embed_tokens(params, [3, 3], [0, 5], [0, 0]).data
    diff = out[1] - out[0]
    want = params["position_table"].data[5] - params["position_table"].data[0]
    np.testing.assert_allclose(diff, want, atol=1e-12)


def test_embed_tokens_identity_projection():
    params = tiny_params(15)
    params["projection"].data[...] = np.eye(CFG.Q, CFG.H)
    params["position_table"].data[...] = 0.0
    params["segment_table"].data[...] = 0.0
    out = embed_tokens(params, [7], [0], [0]).data[0]
    want = np.zeros(CFG.H)
    want[:CFG.Q] = params["node_table"].data[7]
    np.testing.assert_allclose(out, want, atol=1e-15)


def test_embed_tokens_bad_index():
    with pytest.raises(ShapeError):
        embed_tokens(tiny_params(), [CFG.V], [0], [0])


# ---------------------------------------------------------------------------
# transformer
# ---------------------------------------------------------------------------

def _ref_transformer(params, cfg, x, valid):
    """Plain numpy twin of the shared layer stack, forward only."""
    g = lambda n: params[n].data

    def ln(v, gain, bias):
        mu = v.mean(-1, keepdims=True)
        sd = np.sqrt(v.var(-1, keepdims=True) + 1e-12)
        return (v - mu) / sd * gain + bias

    b, lt, h = x.shape
    a, dh = cfg.A, cfg.H // cfg.A
    bias = np.where(valid[:, None, None, :] > 0, 0.0, -1e30)
    for _ in range(cfg.L):
        qkv = []
        for n in ("q", "k", "v"):
            y = x @ g(f"tr.w{n}") + g(f"tr.b{n}")
            qkv.append(y.reshape(b, lt, a, dh).transpose(0, 2, 1, 3))
        q, k, v = qkv
        s = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh) + bias
        s = s - s.max(-1, keepdims=True)
        e = np.exp(s)
        att = e / e.sum(-1, keepdims=True)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(b, lt, cfg.H)
        x = ln(x + ctx @ g("tr.wo") + g("tr.bo"), g("tr.ln1_g"), g("tr.ln1_b"))
        inner = x @ g("tr.w1") + g("tr.b1")
        inner = inner * 0.5 * (1 + erf(inner / np.sqrt(2)))
        x = ln(x + inner @ g("tr.w2") + g("tr.b2"), g("tr.ln2_g"), g("tr.ln2_b"))
    return x


def test_transformer_matches_numpy_twin():
    params = tiny_params(17)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 6, CFG.H))
    valid = np.ones((2, 6))
    valid[0, 4:] = 0.0
    got = transformer_encode(params, CFG, Tensor(x), valid).data
    np.testing.assert_allclose(got, _ref_transformer(params, CFG, x, valid),
                               rtol=1e-10, atol=1e-12)


def test_depth_changes_output_not_count():
    params = tiny_params(19)
    x = np.random.default_rng(6).standard_normal((1, 4, CFG.H))
    c1 = ModelConfig(V=CFG.V, num_types=2, Q=4, H=8, A=2, L=1, d=8, max_len=16)
    out1 = transformer_encode(params, c1, Tensor(x)).data
    out2 = transformer_encode(params, CFG, Tensor(x)).data  # L=2
    assert not np.allclose(out1, out2)


def test_uniform_attention_when_qk_zero():
    params = tiny_params(21)
    params["tr.wq"].data[...] = 0.0
    params["tr.wk"].data[...] = 0.0
    params["tr.bq"].data[...] = 0.0
    params["tr.bk"].data[...] = 0.0
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 5, CFG.H))
    valid = np.array([[1, 1, 1, 1, 0]], dtype=np.float64)
    got = transformer_encode(params, CFG, Tensor(x), valid).data
    # the reference with explicit uniform attention over valid keys
    ref = _ref_transformer(params, CFG, x, valid)
    np.testing.assert_allclose(got, ref, rtol=1e-10)
    # and pad content cannot leak: perturb the masked position only
    x2 = x.copy()
    x2[0, 4] += 123.0
    got2 = transformer_encode(params, CFG, Tensor(x2), valid).data
    np.testing.assert_allclose(got2[0, :4], got[0, :4], rtol=1e-10)


def test_masked_positions_get_zero_attention():
    params = tiny_params(23)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((1, 6, CFG.H))
    valid = np.array([[1, 1, 1, 0, 0, 0]], dtype=np.float64)
    out_a = transformer_encode(params, CFG, Tensor(x), valid).data
    x2 = x.copy()
    x2[0, 3:] = rng.standard_normal((3, CFG.H)) * 50
    out_b = transformer_encode(params, CFG, Tensor(x2), valid).data
    np.testing.assert_allclose(out_a[0, :3], out_b[0, :3], rtol=1e-9)


def test_length_overflow():
    params = tiny_params()
    x = Tensor(np.zeros((1, CFG.max_len + 1, CFG.H)))
    with pytest.raises(ShapeError, match="overflow"):
        transformer_encode(params, CFG, x)


def test_training_dropout_needs_rng_and_is_seeded():
    params = tiny_params(25)
    x = np.random.default_rng(9).standard_normal((1, 4, CFG.H))
    with pytest.raises(ConfigError, match="rng"):
        transformer_encode(params, CFG, Tensor(x), training=True)
    a = transformer_encode(params, CFG, Tensor(x), training=True,
                           rng=np.random.default_rng(4)).data
    b = transformer_encode(params, CFG, Tensor(x), training=True,
                           rng=np.random.default_rng(4)).data
    np.testing.assert_array_equal(a, b)
    c = transformer_encode(params, CFG, Tensor(x)).data
    assert not np.allclose(a, c)


# ---------------------------------------------------------------------------
# full assembly
# ---------------------------------------------------------------------------

def _pair_example():
    seg0 = [TokenRun(0, np.array([1, 4])), TokenRun(1, np.array([7]))]
    seg1 = [TokenRun(0, np.array([2, -1, 5]))]
    return [seg0, seg1]


def test_encode_examples_layout():
    params = tiny_params(27)
    hidden, layout = encode_examples(params, CFG, [_pair_example(),
                                                   [[TokenRun(1, np.array([3]))]]])
    # example 0: CLS,1,4,7,SEP,2,MASK,5,SEP -> 9 tokens
    assert layout.lengths.tolist() == [9, 3]
    assert hidden.data.shape == (2, 9, CFG.H)
    assert layout.valid[1, 3:].sum() == 0
    assert layout.token_index(0, 0, 0, 1) == 2   # node 4
    assert layout.token_index(0, 1, 0, 1) == 6   # MASK slot
    np.testing.assert_array_equal(layout.segments[0, :9],
                                  [0, 0, 0, 0, 0, 1, 1, 1, 1])
    np.testing.assert_array_equal(layout.positions[0, :9], np.arange(9))


def test_encode_examples_deterministic_and_pad_invariant():
    params = tiny_params(29)
    ex = _pair_example()
    h1, _ = encode_examples(params, CFG, [ex])
    h2, _ = encode_examples(params, CFG, [ex])
    np.testing.assert_array_equal(h1.data, h2.data)
    # batching with a second, longer example must not change the first
    longer = [[TokenRun(0, np.array([0, 1, 2, 3])),
               TokenRun(1, np.array([6, 7, 8]))],
              [TokenRun(1, np.array([9, 10]))]]
    h3, layout3 = encode_examples(params, CFG, [ex, longer])
    np.testing.assert_allclose(h3.data[0, :9], h1.data[0], rtol=1e-9,
                               atol=1e-12)


def test_encode_examples_mask_slot_uses_mask_row():
    params = tiny_params(31)
    ex_masked = [[TokenRun(0, np.array([2, -1, 5]))]]   # one example, one segment
    ex_plain = [[TokenRun(0, np.array([2, 4, 5]))]]
    hm, _ = encode_examples(params, CFG, [ex_masked])
    hp, _ = encode_examples(params, CFG, [ex_plain])
    assert not np.allclose(hm.data, hp.data)
    # replacing node_table row 4 must not affect the masked variant
    params["node_table"].data[4] += 9.0
    hm2, _ = encode_examples(params, CFG, [ex_masked])
    np.testing.assert_array_equal(hm.data, hm2.data)


def test_encode_examples_errors():
    params = tiny_params()
    with pytest.raises(DataError, match="empty batch"):
        encode_examples(params, CFG, [])
    with pytest.raises(DataError, match="empty run"):
        encode_examples(params, CFG, [[[TokenRun(0, np.array([], dtype=int))]]])
    big = [[TokenRun(0, np.arange(CFG.max_len))]]
    with pytest.raises(ShapeError, match="overflow"):
        encode_examples(params, CFG, [big])


def test_gather_positions():
    params = tiny_params(33)
    hidden, layout = encode_examples(params, CFG, [_pair_example(),
                                                   [[TokenRun(1, np.array([3]))]]])
    got = gather_positions(hidden, [(0, 0), (1, 2), (0, 6)])
    np.testing.assert_array_equal(got.data[0], hidden.data[0, 0])
    np.testing.assert_array_equal(got.data[1], hidden.data[1, 2])
    np.testing.assert_array_equal(got.data[2], hidden.data[0, 6])


# ---------------------------------------------------------------------------
# full-stack gradient check
# ---------------------------------------------------------------------------

def test_full_stack_gradient_check():
    cfg = ModelConfig(V=8, num_types=2, Q=2, H=4, A=2, L=2, d=4, max_len=8,
                      dropout=0.0)
    params = init_params(cfg, 35)
    ex = [[TokenRun(0, np.array([1, -1])), TokenRun(1, np.array([5]))]]

    def loss_value():
        hidden, _ = encode_examples(params, cfg, [ex])
        return float((hidden.data * w).sum())

    rng = np.random.default_rng(10)
    w = rng.standard_normal((1, 5, cfg.H))  # CLS + 3 nodes + SEP

    with recording():
        hidden, _ = encode_examples(params, cfg, [ex])
        loss = sum_all(ad.mul(hidden, w))
        backward(loss)

    h = 1e-5
    for name in ("node_table", "special_table", "projection",
                 "position_table", "segment_table", "lstm0.fwd.wc_o",
                 "lstm1.bwd.wx_j", "lstm0.fwd.b_f", "tr.wq", "tr.w1",
                 "tr.ln1_g", "tr.b2"):
        p = params[name]
        got = p.grad
        assert got is not None, name
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(6, flat.size), replace=False)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + h
            fp = loss_value()
            flat[i] = keep - h
            fm = loss_value()
            flat[i] = keep
            fd = (fp - fm) / (2 * h)
            g = got.reshape(-1)[i]
            denom = max(abs(fd), 1.0)
            assert abs(g - fd) / denom < 1e-4, (name, i, g, fd)


# ---------------------------------------------------------------------------
# checkpoint round-trip
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    params = tiny_params(37)
    path = str(tmp_path / "model.pfhn")
    save_params(params, path, config={"model.Q": CFG.Q})
    loaded, config = load_params(path, CFG)
    assert config == {"model.Q": CFG.Q}
    assert set(loaded) == set(params)
    for name in params:
        np.testing.assert_array_equal(
            loaded[name].data, params[name].data.astype(np.float32).astype(np.float64))
    # second save of the loaded params is byte-identical
    path2 = str(tmp_path / "model2.pfhn")
    save_params(loaded, path2)
    with open(path, "rb") as a, open(path2, "rb") as b:
        assert a.read() == b.read()


def test_checkpoint_shape_validation(tmp_path):
    params = tiny_params(39)
    path = str(tmp_path / "model.pfhn")
    save_params(params, path)
    other = ModelConfig(V=CFG.V + 1, num_types=2, Q=4, H=8, A=2, L=2, d=8,
                        max_len=16)
    with pytest.raises(DataError, match="shape"):
        load_params(path, other)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "junk.pfhn"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(DataError, match="magic"):
        load_params(str(p))
