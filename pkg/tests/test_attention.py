import math

import numpy as np
import pytest

from videosal import ops
from videosal.attention import (AttentionConfig, AttentionLayer, QkvMaps,
                                TemporalAttentionModule, dot_product_attention,
                                similarity_matrix, split_time)
from videosal.autograd import ParameterStore, Tape, Tensor, backward
from videosal.errors import ConfigError, ContractError, DimensionError
from videosal.rng import SplitMix64


def _feature(shape, seed=0):
    return Tensor(SplitMix64(seed).normal(shape))


def _layer(channels=8, arity=4, pairing="swap_pairs", seed=1, bottleneck=False):
    store = ParameterStore()
    layer = AttentionLayer(store, "l", channels, arity, pairing,
                           SplitMix64(seed), bottleneck=bottleneck, dtype=np.float64)
    return store, layer


def _zero_value_path_and_norm(store, prefix="l"):
    for name in (f"{prefix}.v_row.w", f"{prefix}.v_row.b", f"{prefix}.v_col.w",
                 f"{prefix}.v_col.b", f"{prefix}.norm.gamma", f"{prefix}.norm.beta"):
        store[name].value.data[...] = 0.0


def test_split_time_round_trip_bit_exact():
    f = _feature((1, 6, 4, 3, 2), seed=2)
    parts = split_time(f, 4)
    assert all(p.shape == (1, 6, 1, 3, 2) for p in parts)
    assert np.array_equal(ops.concat(parts, axis=2).data, f.data)
    halves = split_time(f, 2)
    assert all(p.shape == (1, 6, 2, 3, 2) for p in halves)


def test_embed_shapes():
    store, layer = _layer(channels=8)
    part = _feature((1, 8, 1, 4, 4), seed=3)
    emb = layer.embed_qkv(part)
    assert emb.query.shape == (4, 16)
    assert emb.key.shape == (4, 16)
    assert emb.value.shape == (8, 16)
    assert emb.grid == (1, 4, 4)


def test_zero_part_zero_bias_gives_zero_embeddings():
    store, layer = _layer()
    emb = layer.embed_qkv(Tensor(np.zeros((1, 8, 1, 4, 4))))
    assert np.all(emb.query.data == 0)
    assert np.all(emb.key.data == 0)
    assert np.all(emb.value.data == 0)


def test_whole_tensor_embedding_matches_per_part():
    store, layer = _layer()
    f = _feature((1, 8, 4, 3, 3), seed=4)
    split = split_time(f, 4)
    whole = layer._embed_parts(f, 4)
    for part, emb in zip(split, whole):
        ref = layer.embed_qkv(part)
        assert np.allclose(ref.query.data, emb.query.data, atol=1e-12)
        assert np.allclose(ref.key.data, emb.key.data, atol=1e-12)
        assert np.allclose(ref.value.data, emb.value.data, atol=1e-12)


def _maps(q, k, v, grid):
    return QkvMaps(Tensor(q), Tensor(k), Tensor(v), grid)


def test_attention_singleton_key_broadcasts_value():
    rng = SplitMix64(5)
    q = rng.normal((2, 5))
    k = rng.normal((2, 1))
    v = rng.normal((4, 1))
    out = dot_product_attention(_maps(q, q, np.zeros((4, 5)), (1, 1, 5)),
                                _maps(k, k, v, (1, 1, 1)))
    assert out.shape == (4, 5)
    for col in range(5):
        assert np.allclose(out.data[:, col], v[:, 0])


def test_attention_uniform_query_returns_value_mean():
    rng = SplitMix64(6)
    k = rng.normal((2, 7))
    v = rng.normal((4, 7))
    out = dot_product_attention(_maps(np.zeros((2, 7)), k, v, (1, 1, 7)),
                                _maps(k, k, v, (1, 1, 7)))
    assert np.allclose(out.data, np.repeat(v.mean(axis=1, keepdims=True), 7, axis=1),
                       atol=1e-6)


def test_attention_matches_elementwise_oracle():
    # C=2, three positions: direct softmax(q^T k) v^T computed with loops
    rng = SplitMix64(7)
    q = rng.normal((2, 3))
    k = rng.normal((2, 3))
    v = rng.normal((2, 3))
    out = dot_product_attention(_maps(q, k, v, (1, 1, 3)), _maps(q, k, v, (1, 1, 3))).data
    for i in range(3):
        logits = [sum(q[c, i] * k[c, j] for c in range(2)) for j in range(3)]
        m = max(logits)
        weights = [math.exp(l - m) for l in logits]
        z = sum(weights)
        weights = [wt / z for wt in weights]
        for c in range(2):
            expect = sum(weights[j] * v[c, j] for j in range(3))
            assert out[c, i] == pytest.approx(expect, rel=1e-9)


def test_attention_channel_mismatch():
    a = _maps(np.ones((2, 3)), np.ones((2, 3)), np.ones((4, 3)), (1, 1, 3))
    b = _maps(np.ones((3, 3)), np.ones((3, 3)), np.ones((4, 3)), (1, 1, 3))
    with pytest.raises(DimensionError):
        dot_product_attention(a, b)


def test_similarity_matrix_row_stochastic():
    rng = SplitMix64(8)
    a = _maps(rng.normal((2, 6)), rng.normal((2, 6)), rng.normal((4, 6)), (1, 2, 3))
    sim = similarity_matrix(a, a)
    assert sim.shape == (6, 6)
    assert np.all(sim >= 0)
    assert np.allclose(sim.sum(axis=1), 1.0, atol=1e-6)


def test_layer_preserves_shape_and_checks_contracts():
    store, layer = _layer()
    f = _feature((1, 8, 4, 4, 4), seed=9)
    assert layer(f).shape == (1, 8, 4, 4, 4)
    with pytest.raises(ContractError):
        layer(_feature((1, 8, 6, 4, 4), seed=9))  # needs exactly 4 steps
    with pytest.raises(DimensionError):
        layer(_feature((1, 6, 4, 4, 4), seed=9))


def test_layer_residual_identity_with_zeroed_value_path():
    store, layer = _layer()
    _zero_value_path_and_norm(store)
    f = _feature((1, 8, 4, 4, 4), seed=10)
    assert np.array_equal(layer(f).data, f.data)


def test_layer_permutation_coupling():
    # swapping parts 1<->2 and 3<->4 permutes the slot outputs the same way
    store, layer = _layer()
    f = _feature((1, 8, 4, 3, 3), seed=11)
    swapped = Tensor(f.data[:, :, [1, 0, 3, 2]])
    base = [s.data for s in layer.slot_outputs(f)]
    perm = [s.data for s in layer.slot_outputs(swapped)]
    for a, b in zip([base[1], base[0], base[3], base[2]], perm):
        assert np.allclose(a, b, atol=1e-12)


def test_layer2_similarity_extent_is_2hw():
    store, layer = _layer(channels=4, arity=2)
    f = _feature((1, 4, 4, 4, 4), seed=12)
    mats = layer.similarity_matrices(f)
    assert len(mats) == 2
    assert all(m.shape == (32, 32) for m in mats)  # 2*H*W with H=W=4
    assert layer(f).shape == f.shape


def test_module_halves_channels():
    store = ParameterStore()
    mod = TemporalAttentionModule(store, "m", AttentionConfig(channels=8),
                                  SplitMix64(13), dtype=np.float64)
    f = _feature((1, 8, 4, 4, 4), seed=14)
    assert mod(f).shape == (1, 4, 4, 4, 4)
    assert mod.out_channels == 4


def test_module_variants_differ_from_full():
    f = _feature((1, 8, 4, 4, 4), seed=15)
    outs = {}
    for variant in ("full", "no_temporal_relations", "single_similarity"):
        store = ParameterStore()
        mod = TemporalAttentionModule(store, "m", AttentionConfig(channels=8, variant=variant),
                                      SplitMix64(16), dtype=np.float64)
        outs[variant] = mod(f).data
    assert not np.allclose(outs["full"], outs["no_temporal_relations"])
    assert not np.allclose(outs["full"], outs["single_similarity"])


def test_bottleneck_composition_and_shape():
    store, layer = _layer(bottleneck=True, seed=17)
    f = _feature((1, 8, 4, 4, 4), seed=18)
    out = layer(f)
    assert out.shape == f.shape
    # pre-residual equals pool -> attention core -> unpool, explicitly composed
    from videosal.nn import maxpool3d, maxunpool3d
    pooled, idx = maxpool3d(f, (1, 2, 2), (1, 2, 2))
    expect = maxunpool3d(layer._attention_concat(pooled), idx, f.shape[2:])
    assert np.allclose(layer.pre_residual(f).data, expect.data, atol=1e-12)
    # and the residual applies at full resolution
    manual = ops.add(f, layer.norm(expect))
    assert np.allclose(out.data, manual.data, atol=1e-12)


def test_bottleneck_residual_identity():
    store, layer = _layer(bottleneck=True, seed=19)
    _zero_value_path_and_norm(store)
    f = _feature((1, 8, 4, 4, 4), seed=20)
    assert np.array_equal(layer(f).data, f.data)


def test_bottleneck_needs_even_spatial():
    store, layer = _layer(bottleneck=True)
    with pytest.raises(ConfigError):
        layer(Tensor(np.zeros((1, 8, 4, 3, 4))))


def test_bottleneck_shrinks_similarity_extent():
    f = _feature((1, 8, 4, 4, 4), seed=21)
    _, plain = _layer(seed=22)
    _, tight = _layer(seed=22, bottleneck=True)
    hw = 16
    assert plain.similarity_matrices(f)[0].shape == (hw, hw)
    assert tight.similarity_matrices(f)[0].shape == (hw // 4, hw // 4)


def test_per_step_variant_is_timewise_local():
    store, layer = _layer(pairing="per_step", seed=23)
    f = _feature((1, 8, 4, 3, 3), seed=24)
    base = [s.data.copy() for s in layer.slot_outputs(f)]
    poked = f.data.copy()
    poked[:, :, 1] += 0.7  # perturb the second time step only
    after = [s.data for s in layer.slot_outputs(Tensor(poked))]
    assert not np.allclose(base[1], after[1])
    for t in (0, 2, 3):
        assert np.array_equal(base[t], after[t])


def test_per_step_variant_residual_identity():
    store, layer = _layer(pairing="per_step", seed=25)
    _zero_value_path_and_norm(store)
    f = _feature((1, 8, 4, 3, 3), seed=26)
    assert np.array_equal(layer(f).data, f.data)


def test_joint_variant_similarity_is_4hw():
    store, layer = _layer(arity=1, pairing="joint", seed=27)
    f = _feature((1, 8, 4, 4, 4), seed=28)
    mats = layer.similarity_matrices(f)
    assert len(mats) == 1
    assert mats[0].shape == (64, 64)  # 4*H*W with H=W=4
    assert np.allclose(mats[0].sum(axis=1), 1.0, atol=1e-6)
    assert layer(f).shape == f.shape


def test_joint_variant_uniform_query_gets_global_value_mean():
    store, layer = _layer(arity=1, pairing="joint", seed=29)
    for name in ("l.q_reduce.w", "l.q_reduce.b", "l.q_spatial.w", "l.q_spatial.b"):
        store[name].value.data[...] = 0.0
    f = _feature((1, 8, 4, 4, 4), seed=30)
    emb = layer._embed_parts(f, 1)[0]
    expect = emb.value.data.mean(axis=1)
    slot = layer.slot_outputs(f)[0]
    flat = slot.data.reshape(8, -1)
    assert np.allclose(flat, expect[:, None], atol=1e-6)


def test_cross_slot_gradient_connectivity_full_module():
    store = ParameterStore()
    mod = TemporalAttentionModule(store, "m", AttentionConfig(channels=8),
                                  SplitMix64(31), dtype=np.float64)
    f = _feature((1, 8, 4, 3, 3), seed=32)
    # a random weighting makes the probe generic: the channel norm's output
    # sums to zero over channels, so a plain per-slot sum is blind to the
    # attention path at gamma = 1
    probe_w = Tensor(SplitMix64(99).normal((1, 4, 1, 3, 3)))
    for t_out in range(4):
        tape = Tape()
        with tape:
            out = mod(f)
            slot = ops.slice_axis(out, 2, t_out, t_out + 1)
            probe = ops.sum_all(ops.mul(slot, probe_w))
        g = backward(tape, probe).of(f)
        for t_in in range(4):
            if t_in != t_out:
                assert np.linalg.norm(g[:, :, t_in]) > 1e-8


def test_per_step_cross_slot_gradients_exactly_zero():
    store, layer = _layer(pairing="per_step", seed=33)
    f = _feature((1, 8, 4, 3, 3), seed=34)
    tape = Tape()
    with tape:
        pre = layer.pre_residual(f)
        probe = ops.sum_all(ops.slice_axis(pre, 2, 1, 2))
    g = backward(tape, probe).of(f)
    assert np.linalg.norm(g[:, :, 1]) > 1e-8
    for t in (0, 2, 3):
        assert np.all(g[:, :, t] == 0.0)


def test_attention_config_validation():
    with pytest.raises(ConfigError):
        AttentionConfig(channels=7)
    with pytest.raises(ConfigError):
        AttentionConfig(channels=8, variant="banana")
    with pytest.raises(ConfigError):
        AttentionLayer(ParameterStore(), "l", 8, 3, "swap_pairs", SplitMix64(0))
    with pytest.raises(ConfigError):
        AttentionLayer(ParameterStore(), "l", 8, 4, "maybe", SplitMix64(0))
