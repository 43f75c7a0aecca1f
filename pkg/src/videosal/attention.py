"""Temporal self-attention over rank-5 feature maps.

A module cascades two attention layers with a channel-halving pointwise
convolution in between.  Each layer splits its input along time,
embeds every part into query/key/value matrices with small spatial
convolutions, runs dot-product attention between parts, concatenates
the results back along time, and adds a channel-normalized residual.

Pairing modes
    swap_pairs  consecutive part pairs exchange queries: within a pair
                (a, b), slot a receives attention driven by b's queries
                over a's keys/values, and vice versa.  The first layer
                uses four single-step parts, the second two two-step
                parts, so after both layers every time step has
                interacted with every other.
    per_step    each part attends only to itself (no cross-time flow).
    joint       no split; one similarity matrix over all positions of
                all time steps.

An optional spatial bottleneck halves H and W with a 1x2x2 max pool
before the split and restores them with the stored indices before the
norm and residual, shrinking each similarity matrix 16-fold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import ParameterStore, Tensor
from .errors import ConfigError, ContractError, DimensionError
from .nn import ChannelNorm, Conv3d, ConvSpec, maxpool3d, maxunpool3d
from .rng import SplitMix64


@dataclass
class QkvMaps:
    """Embedded query/key/value of one temporal part, as matrices."""

    query: Tensor  # (C/2, T'*H*W)
    key: Tensor    # (C/2, T'*H*W)
    value: Tensor  # (C,   T'*H*W)
    grid: tuple    # (T', H, W) of the source part


def split_time(f: Tensor, n_parts: int):
    """Slice along the time axis into equal parts (concat restores bit-exact)."""
    if f.data.ndim != 5:
        raise DimensionError(f"expected a rank-5 feature map, got {f.shape}")
    return ops.split_axis(f, 2, n_parts)


def dot_product_attention(q_from: QkvMaps, kv_from: QkvMaps,
                          scaling: bool = False) -> Tensor:
    """softmax(q^T k) applied to values; output is (C, L) on the query grid.

    Softmax runs over the key axis, so every row of the similarity
    matrix is a distribution.  No 1/sqrt(d) scaling unless asked.
    """
    if q_from.query.shape[0] != kv_from.key.shape[0]:
        raise DimensionError(
            f"query/key channel extents differ: {q_from.query.shape} vs {kv_from.key.shape}")
    logits = ops.matmul(ops.transpose(q_from.query), kv_from.key)
    if scaling:
        logits = ops.scale(logits, 1.0 / np.sqrt(q_from.query.shape[0]))
    sim = ops.softmax_lastdim(logits)
    return ops.transpose(ops.matmul(sim, ops.transpose(kv_from.value)))


def similarity_matrix(q_from: QkvMaps, kv_from: QkvMaps,
                      scaling: bool = False) -> np.ndarray:
    """The row-stochastic matrix the attention op applies (probe helper)."""
    logits = ops.matmul(ops.transpose(q_from.query), kv_from.key)
    if scaling:
        logits = ops.scale(logits, 1.0 / np.sqrt(q_from.query.shape[0]))
    return ops.softmax_lastdim(logits).data


_PAIRINGS = ("swap_pairs", "per_step", "joint")


class AttentionLayer:
    """One attention layer: split, embed, attend, concat, norm, residual."""

    def __init__(self, store: ParameterStore, name: str, channels: int,
                 arity: int, pairing: str, rng: SplitMix64,
                 scaling: bool = False, bottleneck: bool = False,
                 dtype=np.float32):
        if channels % 2:
            raise ConfigError(f"attention layer needs an even channel count, got {channels}")
        if pairing not in _PAIRINGS:
            raise ConfigError(f"unknown pairing {pairing!r}")
        if pairing == "swap_pairs" and arity % 2:
            raise ConfigError("swap_pairs needs an even number of parts")
        self.channels = channels
        self.arity = arity
        self.pairing = pairing
        self.scaling = scaling
        self.bottleneck = bottleneck
        half = channels // 2
        mk = lambda nm, cin, spec: Conv3d(store, f"{name}.{nm}", cin, spec, rng, dtype)
        self.q_reduce = mk("q_reduce", channels, ConvSpec(half, (1, 1, 1)))
        self.q_spatial = mk("q_spatial", half, ConvSpec(half, (1, 3, 3), padding=(0, 1, 1)))
        self.k_reduce = mk("k_reduce", channels, ConvSpec(half, (1, 1, 1)))
        self.k_spatial = mk("k_spatial", half, ConvSpec(half, (1, 3, 3), padding=(0, 1, 1)))
        self.v_row = mk("v_row", channels, ConvSpec(channels, (1, 3, 1), padding=(0, 1, 0)))
        self.v_col = mk("v_col", channels, ConvSpec(channels, (1, 1, 3), padding=(0, 0, 1)))
        self.norm = ChannelNorm(store, f"{name}.norm", channels, dtype)

    def _check_input(self, f: Tensor):
        if f.data.ndim != 5 or f.shape[0] != 1:
            raise ContractError(f"attention layers take a single-sample rank-5 map, got {f.shape}")
        if f.shape[1] != self.channels:
            raise DimensionError(f"expected {self.channels} channels, got {f.shape[1]}")
        if f.shape[2] != 4:
            raise ContractError(f"attention layers expect 4 time steps, got {f.shape[2]}")

    def embed_qkv(self, part: Tensor) -> QkvMaps:
        """Embed one temporal part on its own (reference path)."""
        n, c, t, h, w = part.shape
        if c != self.channels:
            raise DimensionError(f"part has {c} channels, layer expects {self.channels}")
        q = self.q_spatial(self.q_reduce(part))
        k = self.k_spatial(self.k_reduce(part))
        v = self.v_col(self.v_row(part))
        l = t * h * w
        return QkvMaps(ops.reshape(q, (c // 2, l)), ops.reshape(k, (c // 2, l)),
                       ops.reshape(v, (c, l)), (t, h, w))

    def _embed_parts(self, f: Tensor, arity: int):
        """Embed the whole map once and slice per part.

        The embedding convolutions have temporal extent 1, so this equals
        embedding each part separately.
        """
        n, c, t, h, w = f.shape
        q = ops.reshape(self.q_spatial(self.q_reduce(f)), (c // 2, t * h * w))
        k = ops.reshape(self.k_spatial(self.k_reduce(f)), (c // 2, t * h * w))
        v = ops.reshape(self.v_col(self.v_row(f)), (c, t * h * w))
        tp = t // arity
        step = tp * h * w
        out = []
        for p in range(arity):
            lo, hi = p * step, (p + 1) * step
            out.append(QkvMaps(ops.slice_axis(q, 1, lo, hi),
                               ops.slice_axis(k, 1, lo, hi),
                               ops.slice_axis(v, 1, lo, hi), (tp, h, w)))
        return out

    def _pairs(self, arity: int):
        """(query source, key/value source, output slot) index triples."""
        if self.pairing == "swap_pairs":
            triples = []
            for a in range(0, arity, 2):
                b = a + 1
                triples.append((b, a, a))
                triples.append((a, b, b))
            return triples
        return [(i, i, i) for i in range(arity)]

    def slot_outputs(self, f: Tensor):
        """Per-slot attention results (1, C, T', H, W), before concat."""
        arity = 1 if self.pairing == "joint" else self.arity
        embs = self._embed_parts(f, arity)
        h, w = f.shape[3], f.shape[4]
        slots = [None] * arity
        for qi, ki, slot in self._pairs(arity):
            out = dot_product_attention(embs[qi], embs[ki], self.scaling)
            tp = embs[ki].grid[0]
            slots[slot] = ops.reshape(out, (1, self.channels, tp, h, w))
        return slots

    def _attention_concat(self, f: Tensor) -> Tensor:
        slots = self.slot_outputs(f)
        return slots[0] if len(slots) == 1 else ops.concat(slots, axis=2)

    def pre_residual(self, f: Tensor) -> Tensor:
        """Concatenated (and, with a bottleneck, unpooled) attention result."""
        self._check_input(f)
        if self.bottleneck:
            if f.shape[3] % 2 or f.shape[4] % 2:
                raise ConfigError(
                    f"spatial bottleneck needs even H and W, got {f.shape[3]}x{f.shape[4]}")
            pooled, idx = maxpool3d(f, (1, 2, 2), (1, 2, 2))
            att = self._attention_concat(pooled)
            return maxunpool3d(att, idx, f.shape[2:])
        return self._attention_concat(f)

    def __call__(self, f: Tensor) -> Tensor:
        return ops.add(f, self.norm(self.pre_residual(f)))

    def similarity_matrices(self, f: Tensor):
        """All similarity matrices this layer would apply to ``f``."""
        self._check_input(f)
        if self.bottleneck:
            f, _ = maxpool3d(f, (1, 2, 2), (1, 2, 2))
        arity = 1 if self.pairing == "joint" else self.arity
        embs = self._embed_parts(f, arity)
        return [similarity_matrix(embs[qi], embs[ki], self.scaling)
                for qi, ki, _ in self._pairs(arity)]


@dataclass(frozen=True)
class AttentionConfig:
    """Settings for one temporal attention module."""

    channels: int
    use_bottleneck: bool = False
    variant: str = "full"  # full | no_temporal_relations | single_similarity
    attention_scaling: bool = False
    use_layer1: bool = True
    use_layer2: bool = True

    def __post_init__(self):
        if self.channels % 2:
            raise ConfigError(f"channel count must be even, got {self.channels}")
        if self.variant not in ("full", "no_temporal_relations", "single_similarity"):
            raise ConfigError(f"unknown variant {self.variant!r}")


def _layer_form(variant: str):
    if variant == "full":
        return None  # arity depends on layer position
    if variant == "no_temporal_relations":
        return (4, "per_step")
    return (1, "joint")


class TemporalAttentionModule:
    """Two attention layers around a channel-halving 1x1x1 convolution.

    Maps (C, 4, H, W) to (C/2, 4, H, W).  The middle convolution has no
    activation.  Ablation flags drop either layer; the middle projection
    always runs so the output width stays C/2.
    """

    def __init__(self, store: ParameterStore, name: str, cfg: AttentionConfig,
                 rng: SplitMix64, dtype=np.float32):
        self.cfg = cfg
        c = cfg.channels
        form = _layer_form(cfg.variant)
        self.layer1 = None
        self.layer2 = None
        if cfg.use_layer1:
            arity, pairing = form or (4, "swap_pairs")
            self.layer1 = AttentionLayer(store, f"{name}.layer1", c, arity, pairing,
                                         rng, cfg.attention_scaling, cfg.use_bottleneck, dtype)
        self.mid = Conv3d(store, f"{name}.mid", c, ConvSpec(c // 2, (1, 1, 1)), rng, dtype)
        if cfg.use_layer2:
            arity, pairing = form or (2, "swap_pairs")
            self.layer2 = AttentionLayer(store, f"{name}.layer2", c // 2, arity, pairing,
                                         rng, cfg.attention_scaling, cfg.use_bottleneck, dtype)

    @property
    def out_channels(self) -> int:
        return self.cfg.channels // 2

    def __call__(self, f: Tensor) -> Tensor:
        if f.shape[1] != self.cfg.channels:
            raise DimensionError(f"expected {self.cfg.channels} channels, got {f.shape[1]}")
        x = self.layer1(f) if self.layer1 is not None else f
        x = self.mid(x)
        return self.layer2(x) if self.layer2 is not None else x

    def similarity_matrices(self, f: Tensor):
        mats = []
        x = f
        if self.layer1 is not None:
            mats.extend(self.layer1.similarity_matrices(x))
            x = self.layer1(x)
        x = self.mid(x)
        if self.layer2 is not None:
            mats.extend(self.layer2.similarity_matrices(x))
        return mats
