import numpy as np
import pytest

from videosal import ops
from videosal.autograd import ParameterStore, Tensor
from videosal.errors import ConfigError, DimensionError
from videosal.fusion import FusionStage, align_pair
from videosal.rng import SplitMix64


def _feature(shape, seed=0):
    return Tensor(SplitMix64(seed).normal(shape))


def _stage(deep=8, channels=8, seed=1, **kw):
    store = ParameterStore()
    stage = FusionStage(store, "f", deep, channels, SplitMix64(seed),
                        dtype=np.float64, **kw)
    return store, stage


def test_align_identity_projection_keeps_equal_shapes():
    store, stage = _stage()
    w = np.zeros((8, 8, 1, 1, 1))
    for c in range(8):
        w[c, c, 0, 0, 0] = 1.0
    store["f.proj.w"].value.data[...] = w
    deep = _feature((1, 8, 4, 4, 4), seed=2)
    shallow = _feature((1, 8, 4, 4, 4), seed=3)
    aligned, low = align_pair(deep, shallow, stage.proj)
    assert np.array_equal(aligned.data, deep.data)
    assert low is shallow


def test_align_shape_contract():
    store, stage = _stage(deep=16, channels=16)
    deep = _feature((1, 16, 4, 8, 6), seed=4)
    shallow = _feature((1, 16, 4, 16, 12), seed=5)
    aligned, _ = align_pair(deep, shallow, stage.proj)
    assert aligned.shape == (1, 16, 4, 16, 12)


def test_align_rejects_wrong_time_or_larger_deep():
    store, stage = _stage()
    with pytest.raises(DimensionError):
        align_pair(_feature((1, 8, 2, 4, 4)), _feature((1, 8, 4, 4, 4)), stage.proj)
    with pytest.raises(DimensionError):
        align_pair(_feature((1, 8, 4, 8, 8)), _feature((1, 8, 4, 4, 4)), stage.proj)


def test_weighting_output_shape_and_gate_range():
    store, stage = _stage()
    fh = _feature((1, 8, 4, 4, 4), seed=6)
    fl = _feature((1, 8, 4, 4, 4), seed=7)
    out = stage.attentional_weighting(fh, fl)
    assert out.shape == (1, 8, 4, 4, 4)
    wh, wl = stage.channel_gates(fh, fl)
    for g in (wh, wl):
        assert g.shape == (1, 8, 4, 1, 1)
        assert np.all(g.data > 0) and np.all(g.data < 1)


def test_saturated_gates_select_high_branch():
    store, stage = _stage(seed=8)
    # saturate the gate output: +20 on the high half, -20 on the low half
    store["f.gate_out.b"].value.data[:8] = 20.0
    store["f.gate_out.b"].value.data[8:] = -20.0
    store["f.gate_out.w"].value.data[...] = 0.0
    fh = _feature((1, 8, 4, 4, 4), seed=9)
    fl = _feature((1, 8, 4, 4, 4), seed=10)
    out = stage.attentional_weighting(fh, fl)
    assert np.allclose(out.data, fh.data, atol=1e-3)


def test_equal_inputs_reduce_to_summed_gates():
    store, stage = _stage(seed=11)
    f = _feature((1, 8, 4, 4, 4), seed=12)
    wh, wl = stage.channel_gates(f, f)
    expect = f.data * (wh.data + wl.data)
    assert np.allclose(stage.attentional_weighting(f, f).data, expect, atol=1e-12)


def test_zero_deep_input_contributes_nothing():
    store, stage = _stage(seed=13)
    zeros = Tensor(np.zeros((1, 8, 4, 4, 4)))
    fl = _feature((1, 8, 4, 4, 4), seed=14)
    _, wl = stage.channel_gates(zeros, fl)
    out = stage.attentional_weighting(zeros, fl)
    assert np.allclose(out.data, fl.data * wl.data, atol=1e-12)


def test_multiscale_preserves_shape():
    store, stage = _stage()
    x = _feature((1, 8, 4, 6, 4), seed=15)
    assert stage.multiscale(x).shape == x.shape


def test_multiscale_needs_divisible_channels():
    with pytest.raises(ConfigError):
        _stage(channels=6)


def test_full_stage_shapes_and_upsampling():
    store, stage = _stage(deep=16, channels=8, seed=16)
    deep = _feature((1, 16, 4, 2, 2), seed=17)
    shallow = _feature((1, 8, 4, 4, 4), seed=18)
    assert stage(deep, shallow).shape == (1, 8, 4, 4, 4)


def test_stage_deterministic_given_seed():
    a = _stage(seed=19)[1]
    b = _stage(seed=19)[1]
    deep = _feature((1, 8, 4, 2, 2), seed=20)
    shallow = _feature((1, 8, 4, 4, 4), seed=21)
    assert np.array_equal(a(deep, shallow).data, b(deep, shallow).data)


def test_addition_fusion_has_fewer_parameters_than_concat():
    add_store, _ = _stage(seed=22, fusion="add")
    cat_store, _ = _stage(seed=22, fusion="concat")
    assert add_store.n_values() < cat_store.n_values()


def test_concat_fusion_output_shape():
    store, stage = _stage(seed=23, fusion="concat")
    deep = _feature((1, 8, 4, 2, 2), seed=24)
    shallow = _feature((1, 8, 4, 4, 4), seed=25)
    assert stage(deep, shallow).shape == (1, 8, 4, 4, 4)


def test_gate_order_flag_changes_result():
    f_high = _feature((1, 8, 4, 4, 4), seed=26)
    f_low = _feature((1, 8, 4, 4, 4), seed=27)
    _, norm_first = _stage(seed=28)
    _, relu_first = _stage(seed=28, relu_before_norm=True)
    a = norm_first.attentional_weighting(f_high, f_low)
    b = relu_first.attentional_weighting(f_high, f_low)
    assert not np.allclose(a.data, b.data)


def test_disabled_weighting_is_plain_addition():
    store, stage = _stage(seed=29, use_weighting=False, use_multiscale=False)
    fh = _feature((1, 8, 4, 4, 4), seed=30)
    fl = _feature((1, 8, 4, 4, 4), seed=31)
    # identity projection and equal shapes: output is the elementwise sum
    w = np.zeros((8, 8, 1, 1, 1))
    for c in range(8):
        w[c, c, 0, 0, 0] = 1.0
    store["f.proj.w"].value.data[...] = w
    assert np.allclose(stage(fh, fl).data, fh.data + fl.data, atol=1e-12)


def test_invalid_fusion_mode():
    with pytest.raises(ConfigError):
        _stage(fusion="mean")
