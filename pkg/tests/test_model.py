import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_sequence
from matcn import tensor as T
from matcn.model import (MaTcnConfig, channel_attention, conv_residual_block, double_block, embed_inputs,
                         forward_trip, init_params, mhsa_layer, receptive_field, target_attention, time_aggregate)
from matcn.preprocess import pad_and_mask
from matcn.tensor import Tensor

SMALL = MaTcnConfig(d=16, n_heads=4, n_blocks=2, kernel_size=3, lat_vocab=16, lon_vocab=16)


def params(cfg=SMALL, seed=0):
    return init_params(cfg, np.random.default_rng(seed))


def zeroed(p, *patterns):
    return {k: (Tensor(np.zeros(v.shape)) if any(s in k for s in patterns) else v) for k, v in p.items()}


# ----------------------------------------------------------------- config

def test_default_head_width():
    assert MaTcnConfig().d_k == 8


def test_dilation_schedule():
    cfg = MaTcnConfig()
    assert [cfg.dilation(level) for level in range(1, 5)] == [1, 2, 4, 8]


def test_invalid_config():
    with pytest.raises(ValueError):
        MaTcnConfig(kernel_size=0)
    with pytest.raises(ValueError):
        MaTcnConfig(d=4, n_heads=8)


def test_init_conventions():
    p = params(MaTcnConfig())
    assert abs(p["emb.lat"].data.std() - 0.02) < 0.003
    assert np.all(p["stem.b"].data == 0) and np.all(p["block1.conv1.pw1_b"].data == 0)
    bound = math.sqrt(6 / (64 + 64))
    assert np.abs(p["block1.agg1.w"].data).max() <= bound
    assert p["block1.mhsa.wo"].shape == (64, 64)


# ------------------------------------------------------------------ embed

def test_identical_cells_give_identical_columns(rng):
    seq = random_sequence(rng, 5, 16)
    seq.g_lat[3], seq.g_lon[3], seq.interval[3], seq.velocity[3] = seq.g_lat[1], seq.g_lon[1], seq.interval[1], \
        seq.velocity[1]
    out = embed_inputs(params(), SMALL, pad_and_mask([seq])).data
    np.testing.assert_array_equal(out[0, :, 1], out[0, :, 3])


def test_zero_tables_give_stem_bias(rng):
    p = zeroed(params(), "emb.")
    p["stem.b"] = Tensor(rng.normal(size=16))
    out = embed_inputs(p, SMALL, pad_and_mask([random_sequence(rng, 6, 16)])).data
    np.testing.assert_array_equal(out[0], np.repeat(p["stem.b"].data[:, None], 6, axis=1))


@pytest.mark.parametrize("length", [10, 300])
def test_embed_output_shape(rng, length):
    cfg = MaTcnConfig()
    out = embed_inputs(params(cfg), cfg, pad_and_mask([random_sequence(rng, length, 64)]))
    assert out.shape == (1, 64, length)


def test_out_of_vocab_index(rng):
    seq = random_sequence(rng, 4, 16)
    seq.g_lat[2] = 16
    with pytest.raises(IndexError, match="16"):
        embed_inputs(params(), SMALL, pad_and_mask([seq]))


# ------------------------------------------------------ channel attention

def _ca_params(rng, d=8, r=2):
    return [Tensor(rng.normal(size=s)) for s in ((d, r), (r,), (r, d), (d,))]


def test_channel_gate_saturates_to_identity(rng):
    x = Tensor(rng.normal(size=(1, 8, 5)))
    w1, b1, w2, _ = _ca_params(rng)
    out, gate = channel_attention(x, np.ones((1, 5), bool), w1, b1, Tensor(np.zeros((2, 8))), Tensor(np.full(8, 40.0)))
    np.testing.assert_allclose(gate.data, 1.0, atol=1e-15)
    np.testing.assert_allclose(out.data, x.data, rtol=1e-15)


def test_channel_gate_in_open_interval(rng):
    x = Tensor(rng.normal(size=(2, 8, 5)))
    _, gate = channel_attention(x, np.ones((2, 5), bool), *_ca_params(rng))
    assert np.all((gate.data > 0) & (gate.data < 1))


def test_channel_gate_ignores_padding(rng):
    x = rng.normal(size=(1, 8, 5))
    ps = _ca_params(rng)
    padded = np.concatenate([x, rng.normal(size=(1, 8, 4))], axis=2)
    mask = np.array([[True] * 5 + [False] * 4])
    _, g1 = channel_attention(Tensor(x), np.ones((1, 5), bool), *ps)
    _, g2 = channel_attention(Tensor(padded), mask, *ps)
    np.testing.assert_array_equal(g1.data, g2.data)


def test_channel_attention_all_masked(rng):
    with pytest.raises(ValueError):
        channel_attention(Tensor(np.ones((1, 8, 3))), np.zeros((1, 3), bool), *_ca_params(rng))


# ------------------------------------------------------------------- mhsa

def test_mhsa_single_step(rng):
    x = rng.normal(size=(1, 1, 8))
    wq, wk, wv, wo = (Tensor(rng.normal(size=(8, 8))) for _ in range(4))
    out, attn = mhsa_layer(Tensor(x), np.ones((1, 1), bool), wq, wk, wv, wo, 2)
    np.testing.assert_array_equal(attn.data, 1.0)
    np.testing.assert_allclose(out.data, x @ wv.data @ wo.data + x, rtol=1e-12)


def test_mhsa_rows_sum_to_one(rng):
    mask = np.array([[True] * 6, [True] * 3 + [False] * 3])
    ws = [Tensor(rng.normal(size=(8, 8))) for _ in range(4)]
    _, attn = mhsa_layer(Tensor(rng.normal(size=(2, 6, 8))), mask, *ws, 4)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(attn.data[1, :, :, 3:] == 0.0)


def test_mhsa_all_masked(rng):
    ws = [Tensor(rng.normal(size=(8, 8))) for _ in range(4)]
    with pytest.raises(ValueError):
        mhsa_layer(Tensor(np.ones((1, 2, 8))), np.zeros((1, 2), bool), *ws, 2)


# ------------------------------------------------------------ conv blocks

def test_zero_conv_block_is_residual(rng):
    x = Tensor(rng.normal(size=(1, 4, 6)))
    z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    out = conv_residual_block(x, 2, z(4, 3), z(8, 4), z(8), z(4, 8), z(4))
    np.testing.assert_array_equal(out.data, x.data)


def _conv_stack(p, cfg, x):
    for level in range(1, cfg.n_blocks + 1):
        for sub in (1, 2):
            pre = f"block{level}.conv{sub}."
            x = conv_residual_block(x, cfg.dilation(level), p[pre + "dw"], p[pre + "pw1_w"], p[pre + "pw1_b"],
                                    p[pre + "pw2_w"], p[pre + "pw2_b"])
    return x


def test_conv_block_gradient_is_causal(rng):
    p = params()
    x = T.as_tensor(rng.normal(size=(1, 16, 12)))
    x = Tensor(x.data, requires_grad=True)
    t = 5
    with T.Tape() as tape:
        loss = T.sum(_conv_stack(p, SMALL, x)[:, :, t])
    g = tape.backward(loss)[x]
    assert np.all(g[:, :, t + 1:] == 0.0) and np.any(g[:, :, t] != 0.0)


@pytest.mark.parametrize("n,k,b", [(1, 3, 2), (2, 3, 2), (2, 2, 3), (3, 2, 1)])
def test_receptive_field_matches_measured_influence(n, k, b):
    cfg = MaTcnConfig(d=4, n_heads=1, n_blocks=n, kernel_size=k, dilation_base=b)
    p = params(cfg, seed=5)
    rfs = receptive_field(n, k, b)
    length = rfs + 4
    x = np.random.default_rng(0).normal(size=(1, 4, length))
    base = _conv_stack(p, cfg, Tensor(x)).data
    x2 = x.copy()
    x2[:, :, 0] += 1.0
    changed = np.any(_conv_stack(p, cfg, Tensor(x2)).data != base, axis=1)[0]
    assert changed[rfs - 1] and not changed[rfs:].any()


def test_double_block_growth_is_twice_kernel_span():
    cfg = MaTcnConfig(d=4, n_heads=1, n_blocks=2, kernel_size=3, disable_mhsa=True)
    p = params(cfg, seed=2)
    x = np.random.default_rng(1).normal(size=(1, 4, 20))
    mask = np.ones((1, 20), bool)
    base = double_block(p, cfg, Tensor(x), mask, 2)[0].data
    x2 = x.copy()
    x2[:, :, 3] += 1.0
    changed = np.any(double_block(p, cfg, Tensor(x2), mask, 2)[0].data != base, axis=1)[0]
    span = 2 * (cfg.kernel_size - 1) * cfg.dilation(2)
    assert np.flatnonzero(changed).max() == 3 + span and not changed[:3].any()


def test_receptive_field_values():
    assert receptive_field(4, 10, 2) == 271
    assert receptive_field(1, 2, 2) == 3
    assert receptive_field(3, 1, 2) == receptive_field(2, 1, 5) == 1
    assert receptive_field(4, 10, 1) == 73


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(1, 16), st.integers(1, 6))
def test_receptive_field_monotone(n, k, b):
    r = receptive_field(n, k, b)
    assert receptive_field(n + 1, k, b) >= r and receptive_field(n, k + 1, b) >= r
    assert receptive_field(n, k, b + 1) >= r


def test_receptive_field_rejects_zero():
    with pytest.raises(ValueError):
        receptive_field(0, 3, 2)


# ----------------------------------------------------------- double block

def test_zero_conv_exposes_mhsa_output(rng):
    p = zeroed(params(), "conv")
    x = Tensor(rng.normal(size=(1, 16, 7)))
    mask = np.ones((1, 7), bool)
    out, h1, h2 = double_block(p, SMALL, x, mask, 1)
    att, _ = mhsa_layer(T.swapaxes(x, 1, 2), mask, p["block1.mhsa.wq"], p["block1.mhsa.wk"],
                        p["block1.mhsa.wv"], p["block1.mhsa.wo"], SMALL.n_heads)
    np.testing.assert_array_equal(h1.data, T.swapaxes(att, 1, 2).data)
    np.testing.assert_array_equal(h2.data, h1.data)
    assert out.shape == x.shape


def test_double_block_level_bounds(rng):
    with pytest.raises(ValueError):
        double_block(params(), SMALL, Tensor(np.zeros((1, 16, 3))), np.ones((1, 3), bool), 3)


# ------------------------------------------------------------ aggregation

def test_time_aggregate_identical_steps(rng):
    col = rng.normal(size=(1, 6, 1))
    h = Tensor(np.repeat(col, 5, axis=2))
    mask = np.array([[True, True, True, False, False]])
    pooled, lam = time_aggregate(h, mask, np.array([3]), Tensor(rng.normal(size=(6, 6))))
    np.testing.assert_allclose(lam.data, [[1 / 3, 1 / 3, 1 / 3, 0, 0]], rtol=1e-14)
    assert np.all(lam.data[0, 3:] == 0.0)
    np.testing.assert_allclose(pooled.data[0], col[0, :, 0], rtol=1e-14)


def test_time_aggregate_single_step(rng):
    h = Tensor(rng.normal(size=(1, 6, 1)))
    pooled, lam = time_aggregate(h, np.ones((1, 1), bool), np.array([1]), Tensor(rng.normal(size=(6, 6))))
    assert lam.data.tolist() == [[1.0]]
    np.testing.assert_array_equal(pooled.data[0], h.data[0, :, 0])


def test_target_attention_identical_inputs(rng):
    h = Tensor(rng.normal(size=(2, 6)))
    tr, beta = target_attention([h] * 8, Tensor(rng.normal(size=(2, 6))), Tensor(rng.normal(size=(6, 6))),
                                Tensor(rng.normal(size=6)))
    np.testing.assert_allclose(beta.data, 1 / 8, rtol=1e-14)
    np.testing.assert_allclose(tr.data, h.data, rtol=1e-14)


def test_target_attention_dimension_mismatch(rng):
    with pytest.raises(T.ShapeError):
        target_attention([Tensor(np.ones((1, 6)))] * 2, Tensor(np.ones((1, 5))), Tensor(np.ones((6, 6))),
                         Tensor(np.ones(6)))


# ---------------------------------------------------------- forward_trip

def test_forward_trip_weights_and_dimension(rng):
    cfg = MaTcnConfig(lat_vocab=16, lon_vocab=16)
    p = params(cfg)
    seqs = [random_sequence(rng, n, 16) for n in (12, 5)]
    trace = {}
    d_emb = Tensor(rng.normal(size=(2, 64)))
    tr = forward_trip(p, cfg, pad_and_mask(seqs), d_emb, trace=trace)
    assert tr.shape == (2, 64)
    assert trace["beta"].shape == (2, 8) and len(trace["lambda"]) == 8 and len(trace["attention"]) == 4
    np.testing.assert_allclose(trace["beta"].data.sum(axis=1), 1.0, atol=1e-12)
    for lam in trace["lambda"]:
        assert np.all(lam.data[1, 5:] == 0.0)
    np.testing.assert_allclose(T.sum(trace["lambda"][0], axis=1).data, 1.0, atol=1e-12)


def test_identical_and_different_trajectories(rng):
    p = params()
    a, b = random_sequence(rng, 8, 16), random_sequence(rng, 8, 16)
    d_emb = Tensor(np.tile(rng.normal(size=16), (3, 1)))
    tr = forward_trip(p, SMALL, pad_and_mask([a, a, b]), d_emb).data
    np.testing.assert_array_equal(tr[0], tr[1])
    assert not np.array_equal(tr[0], tr[2])


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 30), st.integers(1, 25), st.integers(0, 2**31))
def test_padding_leaves_trip_bit_identical(n, extra, seed):
    rng = np.random.default_rng(seed)
    seq = random_sequence(rng, n, 16)
    d_emb = Tensor(rng.normal(size=(1, 16)))
    p = params(seed=seed % 7)
    a = forward_trip(p, SMALL, pad_and_mask([seq]), d_emb).data
    b = forward_trip(p, SMALL, pad_and_mask([seq], n + extra), d_emb).data
    np.testing.assert_array_equal(a, b)


def test_ablation_flags_drop_parameter_groups():
    full = params(MaTcnConfig())
    no_mhsa = params(MaTcnConfig(disable_mhsa=True))
    no_agg = params(MaTcnConfig(disable_aggregation=True))
    assert set(full) - set(no_mhsa) == {f"block{i}.mhsa.{w}" for i in range(1, 5) for w in ("wq", "wk", "wv", "wo")}
    assert set(full) - set(no_agg) == {f"block{i}.agg{s}.w" for i in range(1, 5) for s in (1, 2)} | \
        {"target.v", "target.b"}
    assert set(no_mhsa) < set(full) and set(no_agg) < set(full)


def test_aggregation_ablation_uses_last_real_step(rng):
    cfg = MaTcnConfig(d=16, n_heads=4, n_blocks=2, kernel_size=3, lat_vocab=16, lon_vocab=16,
                      disable_aggregation=True)
    p = params(cfg)
    seqs = [random_sequence(rng, 9, 16), random_sequence(rng, 4, 16)]
    batch = pad_and_mask(seqs)
    tr = forward_trip(p, cfg, batch, None).data
    x = embed_inputs(p, cfg, batch)
    x, _ = channel_attention(x, batch.mask, p["ca.w1"], p["ca.b1"], p["ca.w2"], p["ca.b2"])
    for level in (1, 2):
        x = double_block(p, cfg, x, batch.mask, level)[0]
    np.testing.assert_array_equal(tr[1], x.data[1, :, 3])
    np.testing.assert_array_equal(tr[0], x.data[0, :, 8])
