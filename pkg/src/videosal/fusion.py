"""Top-down fusion of adjacent branch features.

A fusion stage aligns the deeper feature to the shallower one (pointwise
channel projection + trilinear spatial upsample), merges the pair, and
mixes the result through an inception-style block.

The attention-weighted merge concatenates the pair on channels, masks it
with a single-channel sigmoid map, squeezes space with global average
pooling, produces per-channel gates through a two-convolution bottleneck
(reduction ratio 4) ending in a sigmoid, splits the gates back into the
two halves, and sums the re-weighted features.  The gate bottleneck runs
conv -> norm -> relu -> conv -> sigmoid; ``relu_before_norm`` swaps the
middle two.

The multi-scale mixer has four parallel branches, each emitting C/4
channels: 1x1x1 conv, 1x3x3 conv, 3x3x3 conv, and 3x3x3 average pooling
followed by a 1x1x1 conv; their concatenation restores C channels and
preserves (T, H, W).
"""

from __future__ import annotations

import numpy as np

from . import ops
from .autograd import ParameterStore, Tensor
from .errors import ConfigError, DimensionError
from .nn import (ChannelNorm, Conv3d, ConvSpec, avgpool3d,
                 global_avg_pool_spatial, upsample_trilinear)
from .rng import SplitMix64


def align_pair(f_deep: Tensor, f_shallow: Tensor, proj: Conv3d):
    """Project the deeper feature to the shallower channel width and upsample.

    Temporal extents must already agree (both 4); only H and W change.
    """
    if f_deep.shape[2] != 4 or f_shallow.shape[2] != 4:
        raise DimensionError(
            f"fusion expects 4 time steps, got {f_deep.shape[2]} and {f_shallow.shape[2]}")
    if f_deep.shape[3] > f_shallow.shape[3] or f_deep.shape[4] > f_shallow.shape[4]:
        raise DimensionError("deep feature must not exceed the shallow spatial extents")
    aligned = upsample_trilinear(proj(f_deep), f_shallow.shape[2:])
    return aligned, f_shallow


class FusionStage:
    """One attention-weighted multi-scale fusion step."""

    def __init__(self, store: ParameterStore, name: str, deep_channels: int,
                 channels: int, rng: SplitMix64, use_weighting: bool = True,
                 use_multiscale: bool = True, fusion: str = "add",
                 relu_before_norm: bool = False, dtype=np.float32):
        if fusion not in ("add", "concat"):
            raise ConfigError(f"unknown fusion mode {fusion!r}")
        if use_multiscale and channels % 4:
            raise ConfigError(f"multi-scale mixing needs channels % 4 == 0, got {channels}")
        self.channels = channels
        self.use_weighting = use_weighting
        self.use_multiscale = use_multiscale
        self.fusion = fusion
        self.relu_before_norm = relu_before_norm

        mk = lambda nm, cin, spec: Conv3d(store, f"{name}.{nm}", cin, spec, rng, dtype)
        self.proj = mk("proj", deep_channels, ConvSpec(channels, (1, 1, 1)))
        c2 = 2 * channels
        # every stage initializes near the plain top-down addition baseline
        # (gates almost open, mixer almost a passthrough) and learns to
        # deviate; with neutral inits the richer structure only slows the
        # first few hundred steps
        if use_weighting:
            reduced = max(c2 // 4, 1)
            self.mask_conv = mk("mask", c2, ConvSpec(1, (1, 1, 1)))
            self.gate_in = mk("gate_in", c2, ConvSpec(reduced, (1, 1, 1)))
            self.gate_norm = ChannelNorm(store, f"{name}.gate_norm", reduced, dtype)
            self.gate_out = Conv3d(store, f"{name}.gate_out", reduced,
                                   ConvSpec(c2, (1, 1, 1)), rng, dtype, bias_init=4.0)
        if fusion == "concat":
            self.concat_proj = mk("concat_proj", c2, ConvSpec(channels, (1, 1, 1)))
        if use_multiscale:
            quarter = channels // 4
            self.mix_point = mk("mix_point", channels, ConvSpec(quarter, (1, 1, 1)))
            self.mix_spatial = mk("mix_spatial", channels,
                                  ConvSpec(quarter, (1, 3, 3), padding=(0, 1, 1)))
            self.mix_cube = mk("mix_cube", channels,
                               ConvSpec(quarter, (3, 3, 3), padding=(1, 1, 1)))
            self.mix_pool_proj = mk("mix_pool_proj", channels, ConvSpec(quarter, (1, 1, 1)))
            centers = {"mix_point": (0, 0, 0, 0), "mix_spatial": (1, 0, 1, 1),
                       "mix_cube": (2, 1, 1, 1), "mix_pool_proj": (3, 0, 0, 0)}
            for nm, (slot, kt, kh, kw) in centers.items():
                w = store[f"{name}.{nm}.w"].value.data
                w *= 0.25
                for i in range(quarter):
                    w[i, slot * quarter + i, kt, kh, kw] += 1.0

    def channel_gates(self, f_high: Tensor, f_low: Tensor):
        """Per-channel sigmoid gates for the (high, low) pair; both (N, C, 4, 1, 1)."""
        cat = ops.concat([f_high, f_low], axis=1)
        mask = ops.sigmoid(self.mask_conv(cat))
        masked = ops.mul(mask, cat)
        z = self.gate_in(global_avg_pool_spatial(masked))
        if self.relu_before_norm:
            z = self.gate_norm(ops.relu(z))
        else:
            z = ops.relu(self.gate_norm(z))
        gates = ops.sigmoid(self.gate_out(z))
        c = self.channels
        return ops.slice_axis(gates, 1, 0, c), ops.slice_axis(gates, 1, c, 2 * c)

    def attentional_weighting(self, f_high: Tensor, f_low: Tensor) -> Tensor:
        w_high, w_low = self.channel_gates(f_high, f_low)
        a = ops.mul(f_high, w_high)
        b = ops.mul(f_low, w_low)
        if self.fusion == "add":
            return ops.add(a, b)
        return self.concat_proj(ops.concat([a, b], axis=1))

    def multiscale(self, x: Tensor) -> Tensor:
        branches = [
            self.mix_point(x),
            self.mix_spatial(x),
            self.mix_cube(x),
            self.mix_pool_proj(avgpool3d(x, (3, 3, 3), (1, 1, 1), (1, 1, 1))),
        ]
        return ops.concat(branches, axis=1)

    def __call__(self, f_deep: Tensor, f_shallow: Tensor) -> Tensor:
        f_high, f_low = align_pair(f_deep, f_shallow, self.proj)
        if self.use_weighting:
            merged = self.attentional_weighting(f_high, f_low)
        elif self.fusion == "concat":
            merged = self.concat_proj(ops.concat([f_high, f_low], axis=1))
        else:
            merged = ops.add(f_high, f_low)
        if self.use_multiscale:
            return self.multiscale(merged)
        return merged
