"""Finite-difference verification of every differentiable piece.

Each check builds a scalar loss at float64, takes tape gradients, and
compares them against central differences (h = 1e-4) elementwise.  The
reported number is the worst relative error over all checked tensors;
anything below 1e-3 passes.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .attention import AttentionConfig, AttentionLayer, TemporalAttentionModule
from .autograd import (ParameterStore, SelectionTape, Tape, Tensor, backward,
                       finite_diff_grad, frozen_selections, relative_error)
from .data import SyntheticScene, gen_synthetic_clip
from .fusion import FusionStage
from .model import ModelConfig, SaliencyModel, pad_clip_for_frame
from .nn import (avgpool3d, conv3d, global_avg_pool_spatial, maxpool3d,
                 maxunpool3d, upsample_trilinear)
from .rng import SplitMix64
from .saliency import LossConfig, loss_cc, loss_kl, loss_total

TOLERANCE = 1e-3
STEP = 1e-4


def check_grads(build, wrt, h: float = STEP) -> float:
    """Max relative error between tape and finite-difference gradients.

    ``build`` re-runs the forward pass from current tensor data and
    returns a scalar tensor; ``wrt`` lists the tensors to check.
    """
    tape = Tape()
    with tape:
        loss = build()
    grads = backward(tape, loss, keep=wrt)
    worst = 0.0
    for t in wrt:
        ad = grads.of(t)
        if ad is None:
            ad = np.zeros_like(t.data)
        fd = finite_diff_grad(lambda _t: build(), t, h)
        worst = max(worst, relative_error(ad, fd))
    return worst


def _t(rng, shape, shift=0.0):
    return Tensor(rng.normal(shape) + shift)


def op_checks(seed: int = 0):
    """(name, max relative error) for every core op and composite block."""
    results = []

    def run(name, fn):
        results.append((name, fn()))

    rng = SplitMix64(seed)

    def wsum(expr, probe):
        return ops.sum_all(ops.mul(expr, probe))

    def probe_for(shape):
        return Tensor(rng.normal(shape))

    a, b = _t(rng, (5, 7)), _t(rng, (7, 3))
    pm = probe_for((5, 3))
    run("matmul", lambda: check_grads(lambda: wsum(ops.matmul(a, b), pm), [a, b]))

    x = _t(rng, (3, 5))
    ps = probe_for((3, 5))
    run("softmax_lastdim", lambda: check_grads(lambda: wsum(ops.softmax_lastdim(x), ps), [x]))

    xn = _t(rng, (4, 8, 6))
    gamma, beta = _t(rng, (6,), shift=1.0), _t(rng, (6,))
    pn = probe_for((4, 8, 6))
    run("layer_norm", lambda: check_grads(
        lambda: wsum(ops.layer_norm(xn, gamma, beta, axes=(2,)), pn), [xn, gamma, beta]))

    xr = Tensor(rng.normal((4, 6)) + np.where(rng.uniform((4, 6)) > 0.5, 1.0, -1.0))
    pr = probe_for((4, 6))
    run("relu", lambda: check_grads(lambda: wsum(ops.relu(xr), pr), [xr]))

    xs = _t(rng, (4, 6))
    run("sigmoid", lambda: check_grads(lambda: wsum(ops.sigmoid(xs), pr), [xs]))

    ba, bb = _t(rng, (3, 4, 5)), _t(rng, (1, 4, 1))
    pb = probe_for((3, 4, 5))
    run("add_broadcast", lambda: check_grads(lambda: wsum(ops.add(ba, bb), pb), [ba, bb]))
    run("mul_broadcast", lambda: check_grads(lambda: wsum(ops.mul(ba, bb), pb), [ba, bb]))

    xe = _t(rng, (2, 3, 4))
    pe = probe_for((2, 3, 4))
    run("normalize_to_sum", lambda: check_grads(
        lambda: wsum(ops.normalize_to_sum(ops.sigmoid(xe)), pe), [xe]))

    xc = _t(rng, (1, 3, 5, 6, 7))
    wc = Tensor(rng.normal((4, 3, 1, 3, 3)) * 0.5)
    bc = _t(rng, (4,))
    pc = probe_for((1, 4, 5, 3, 4))
    run("conv3d", lambda: check_grads(
        lambda: wsum(conv3d(xc, wc, bc, (1, 2, 2), (0, 1, 1)), pc), [xc, wc, bc]))

    wp = Tensor(rng.normal((2, 3, 1, 1, 1)))
    pp = probe_for((1, 2, 5, 6, 7))
    run("conv3d_pointwise", lambda: check_grads(
        lambda: wsum(conv3d(xc, wp, None), pp), [xc, wp]))

    xm = _t(rng, (1, 2, 4, 4, 4))
    pq = probe_for((1, 2, 2, 2, 2))
    run("maxpool3d", lambda: check_grads(
        lambda: wsum(maxpool3d(xm, (2, 2, 2), (2, 2, 2))[0], pq), [xm]))

    pu = probe_for((1, 2, 4, 4, 4))

    def unpool_loss():
        pooled, idx = maxpool3d(xm, (1, 2, 2), (1, 2, 2))
        return wsum(maxunpool3d(ops.sigmoid(pooled), idx, (4, 4, 4)), pu)

    run("maxunpool3d", lambda: check_grads(unpool_loss, [xm]))

    pa = probe_for((1, 2, 4, 4, 4))
    run("avgpool3d", lambda: check_grads(
        lambda: wsum(avgpool3d(xm, (3, 3, 3), (1, 1, 1), (1, 1, 1)), pa), [xm]))

    pg = probe_for((1, 2, 4, 1, 1))
    run("global_avg_pool", lambda: check_grads(
        lambda: wsum(global_avg_pool_spatial(xm), pg), [xm]))

    pt = probe_for((1, 2, 4, 8, 6))
    run("upsample_trilinear", lambda: check_grads(
        lambda: wsum(upsample_trilinear(xm, (4, 8, 6)), pt), [xm]))

    s_raw = Tensor(rng.uniform((6, 6)) + 0.05)
    g_map = rng.uniform((6, 6)) + 0.05
    g_map /= g_map.sum()

    def norm_s():
        return ops.normalize_to_sum(s_raw)

    run("loss_kl", lambda: check_grads(lambda: loss_kl(norm_s(), g_map), [s_raw]))
    run("loss_cc", lambda: check_grads(lambda: loss_cc(norm_s(), g_map), [s_raw]))
    run("loss_total", lambda: check_grads(lambda: loss_total(norm_s(), g_map), [s_raw]))

    results.extend(module_checks(seed))
    return results


def _store_params(store: ParameterStore):
    return [e.value for _, e in store.items()]


def module_checks(seed: int = 0):
    """Gradient checks of the attention and fusion blocks in isolation."""
    results = []
    rng = SplitMix64(seed + 1)

    def wsum(expr, probe):
        return ops.sum_all(ops.mul(expr, probe))

    def layer_case(pairing, arity, bottleneck=False):
        store = ParameterStore()
        layer = AttentionLayer(store, "layer", 8, arity, pairing, SplitMix64(seed + 2),
                               bottleneck=bottleneck, dtype=np.float64)
        f = _t(rng, (1, 8, 4, 4, 4))
        probe = Tensor(rng.normal((1, 8, 4, 4, 4)))
        wrt = [f] + _store_params(store)
        return check_grads(lambda: wsum(layer(f), probe), wrt)

    results.append(("attention_layer_swap", layer_case("swap_pairs", 4)))
    results.append(("attention_layer_per_step", layer_case("per_step", 4)))
    results.append(("attention_layer_joint", layer_case("joint", 1)))
    results.append(("attention_layer_bottleneck", layer_case("swap_pairs", 4, bottleneck=True)))

    def module_case(variant, bottleneck=False):
        store = ParameterStore()
        cfg = AttentionConfig(channels=8, use_bottleneck=bottleneck, variant=variant)
        mod = TemporalAttentionModule(store, "mod", cfg, SplitMix64(seed + 3), dtype=np.float64)
        f = _t(rng, (1, 8, 4, 4, 4))
        probe = Tensor(rng.normal((1, 4, 4, 4, 4)))
        wrt = [f] + _store_params(store)
        return check_grads(lambda: wsum(mod(f), probe), wrt)

    results.append(("attention_module_full", module_case("full")))
    results.append(("attention_module_bottleneck", module_case("full", bottleneck=True)))

    def fusion_case(fusion="add", weighting=True, multiscale=True):
        store = ParameterStore()
        stage = FusionStage(store, "fuse", deep_channels=8, channels=8,
                            rng=SplitMix64(seed + 4), use_weighting=weighting,
                            use_multiscale=multiscale, fusion=fusion, dtype=np.float64)
        deep = _t(rng, (1, 8, 4, 2, 2))
        shallow = _t(rng, (1, 8, 4, 4, 4))
        probe = Tensor(rng.normal((1, 8, 4, 4, 4)))
        wrt = [deep, shallow] + _store_params(store)
        return check_grads(lambda: wsum(stage(deep, shallow), probe), wrt)

    results.append(("fusion_stage", fusion_case()))
    results.append(("fusion_stage_concat", fusion_case(fusion="concat")))
    return results


def _calibrate_branch_scales(model, window, target_std=0.25):
    """Rescale the convs feeding each branch to a healthy activation spread.

    At the micro geometry the deepest branch is 1x1 spatial, so its 3x3
    kernels see mostly padding and activations collapse toward zero.
    That parks the channel norms in their epsilon-dominated regime, where
    the loss curvature is ~1/eps and an h=1e-4 difference quotient can
    no longer resolve the (correct) gradient.  Biases start at zero, so
    scaling weights rescales branch outputs exactly.
    """
    feats = model.compressor(model.encoder(model._clip_tensor(window)))
    store = model.store
    for i, f in enumerate(feats):
        k = target_std / max(float(f.data.std()), 1e-12)
        if i < 3:
            names = [f"compress.b{i + 1}"]
        else:
            names = ["enc.b4a.t", "enc.b4a.s", "enc.b4b.t", "enc.b4b.s"]
        per = k ** (1.0 / len(names))
        for nm in names:
            store[nm + ".w"].value.data *= per


def micro_model_setup(seed: int = 0):
    """Micro model, one synthetic window, and its target density (float64)."""
    store = ParameterStore()
    cfg = ModelConfig(t_in=8, height=16, width=16, channels=(8, 8, 8, 8), seed=seed)
    model = SaliencyModel(store, cfg, dtype=np.float64)
    frames, density, _ = gen_synthetic_clip(
        SyntheticScene(n_blobs=1, sigma_range=(2.0, 3.0)), 12, 16, 16, seed + 17)
    window = pad_clip_for_frame(frames.astype(np.float64), 5, cfg.t_in, cfg.supervision)
    target = density[5].astype(np.float64)
    _calibrate_branch_scales(model, window)
    return model, window, target


def check_micro_model(seed: int = 0, progress=None):
    """Finite-difference check of every parameter of the full micro model.

    Relu masks and pool argmax selections are recorded on the baseline
    forward and replayed for every probe: the raw loss is only piecewise
    smooth in 10k+ parameters, so some probe interval always straddles a
    kink or an argmax flip, where a difference quotient measures nothing.
    With the choices frozen each probe differentiates exactly the smooth
    function the tape computed.

    Returns (worst error overall, per-parameter list).  Runs the loss
    forward without a tape for every perturbed element, so expect a few
    minutes of work.
    """
    model, window, target = micro_model_setup(seed)
    loss_cfg = LossConfig()
    selections = SelectionTape()

    tape = Tape()
    with tape, frozen_selections(selections):
        loss = loss_total(model.forward(window), target, loss_cfg)
    grads = backward(tape, loss)

    selections.start_replay()

    def build():
        selections.rewind()
        with frozen_selections(selections):
            return loss_total(model.forward(window), target, loss_cfg)

    per_param = []
    worst = 0.0
    for name, entry in model.store.items():
        ad = grads.of(entry.value)
        if ad is None:
            ad = np.zeros_like(entry.value.data)
        fd = finite_diff_grad(lambda _t: build(), entry.value, STEP)
        err = relative_error(ad, fd)
        per_param.append((name, err, entry.value.size))
        worst = max(worst, err)
        if progress is not None:
            progress(name, err)
    return worst, per_param
