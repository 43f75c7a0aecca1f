"""Neural operators over rank-5 feature maps and the Adam update.

Feature maps are always laid out (N, C, T, H, W).  Convolution uses the
cross-correlation convention (no kernel flip).  Max pooling keeps flat
argmax indices into the source (T, H, W) volume so unpooling can restore
resolution exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import ops
from .autograd import ParameterStore, Tensor, active_selections, record
from .errors import ConfigError, ContractError, DimensionError
from .rng import SplitMix64

_AXIS_NAMES = ("time", "height", "width")


def _out_extent(size, k, s, p, axis):
    o = (size + 2 * p - k) // s + 1
    if o < 1:
        raise DimensionError(
            f"conv/pool output extent on {_AXIS_NAMES[axis]} axis is {o} "
            f"(input {size}, kernel {k}, stride {s}, padding {p})")
    return o


def _pad5(v, pt, ph, pw):
    if not (pt or ph or pw):
        return v
    n, c, t, h, w = v.shape
    out = np.zeros((n, c, t + 2 * pt, h + 2 * ph, w + 2 * pw), dtype=v.dtype)
    out[:, :, pt:pt + t, ph:ph + h, pw:pw + w] = v
    return out


def _window_view(v, kt, kh, kw, st, sh, sw):
    n, c, t, h, w = v.shape
    to = (t - kt) // st + 1
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    sn, sc, stt, shh, sww = v.strides
    return as_strided(
        v, (n, c, to, ho, wo, kt, kh, kw),
        (sn, sc, stt * st, shh * sh, sww * sw, stt, shh, sww))


def conv3d(x: Tensor, w: Tensor, b: Tensor | None,
           stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """3D cross-correlation; weights are (Cout, Cin, kT, kH, kW)."""
    vx, vw = x.data, w.data
    if vx.ndim != 5 or vw.ndim != 5:
        raise DimensionError(f"conv3d needs rank-5 input/weights, got {vx.shape}, {vw.shape}")
    n, cin, t, h, w_ = vx.shape
    cout, cin2, kt, kh, kw = vw.shape
    if cin2 != cin:
        raise DimensionError(f"conv3d channel mismatch: input {cin}, weights expect {cin2}")
    st_, sh, sw = stride
    pt, ph, pw = padding
    if pt >= kt or ph >= kh or pw >= kw:
        raise DimensionError(f"padding {padding} must stay below kernel {(kt, kh, kw)}")

    if (kt, kh, kw) == (1, 1, 1) and (st_, sh, sw) == (1, 1, 1):
        # pointwise fast path: a plain channel-mixing matmul
        y = np.matmul(vw.reshape(cout, cin), vx.reshape(n, cin, -1))
        out_arr = y.reshape(n, cout, t, h, w_)
        if b is not None:
            out_arr = out_arr + b.data.reshape(1, -1, 1, 1, 1)
        out = Tensor(out_arr)

        def bwd_point(g):
            gm = g.reshape(n, cout, -1)
            xm = vx.reshape(n, cin, -1)
            dw = np.einsum("nol,nil->oi", gm, xm).reshape(vw.shape)
            dx = np.matmul(vw.reshape(cout, cin).T, gm).reshape(vx.shape)
            if b is None:
                return dx, dw
            return dx, dw, g.sum(axis=(0, 2, 3, 4))

        record((x, w) if b is None else (x, w, b), out, bwd_point)
        return out

    to = _out_extent(t, kt, st_, pt, 0)
    ho = _out_extent(h, kh, sh, ph, 1)
    wo = _out_extent(w_, kw, sw, pw, 2)
    xp = _pad5(vx, pt, ph, pw)
    view = _window_view(xp, kt, kh, kw, st_, sh, sw)
    # (n, Cin*kT*kH*kW, To*Ho*Wo) with the kernel axes fastest within a column
    cols = view.transpose(0, 1, 5, 6, 7, 2, 3, 4).reshape(n, cin * kt * kh * kw, to * ho * wo)
    wm = vw.reshape(cout, -1)
    y = np.matmul(wm, cols).reshape(n, cout, to, ho, wo)
    if b is not None:
        y = y + b.data.reshape(1, -1, 1, 1, 1)
    out = Tensor(y)

    def bwd(g):
        gm = g.reshape(n, cout, -1)
        dw = np.einsum("nol,nkl->ok", gm, cols).reshape(vw.shape)
        dcols = np.matmul(wm.T, gm).reshape(n, cin, kt, kh, kw, to, ho, wo)
        dxp = np.zeros_like(xp)
        for it in range(kt):
            for ih in range(kh):
                for iw in range(kw):
                    dxp[:, :,
                        it:it + to * st_:st_,
                        ih:ih + ho * sh:sh,
                        iw:iw + wo * sw:sw] += dcols[:, :, it, ih, iw]
        dx = dxp[:, :, pt:pt + t, ph:ph + h, pw:pw + w_] if (pt or ph or pw) else dxp
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3, 4))

    record((x, w) if b is None else (x, w, b), out, bwd)
    return out


def maxpool3d(x: Tensor, kernel, stride):
    """Max pooling; returns (pooled, flat argmax indices into (T, H, W)).

    Ties go to the lowest flat index inside the window.
    """
    kt, kh, kw = kernel
    st_, sh, sw = stride
    vx = x.data
    n, c, t, h, w = vx.shape
    to = _out_extent(t, kt, st_, 0, 0)
    ho = _out_extent(h, kh, sh, 0, 1)
    wo = _out_extent(w, kw, sw, 0, 2)
    windows = _window_view(vx, kt, kh, kw, st_, sh, sw).reshape(n, c, to, ho, wo, -1)
    sel = active_selections()
    if sel is None:
        arg = windows.argmax(axis=-1)
    else:
        arg = sel.take("pool", lambda: windows.argmax(axis=-1))
    pooled = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    # window-local argmax -> flat source index
    it, ih, iw = np.unravel_index(arg, (kt, kh, kw))
    base_t = (np.arange(to) * st_).reshape(1, 1, to, 1, 1)
    base_h = (np.arange(ho) * sh).reshape(1, 1, 1, ho, 1)
    base_w = (np.arange(wo) * sw).reshape(1, 1, 1, 1, wo)
    idx = ((base_t + it) * h + (base_h + ih)) * w + (base_w + iw)
    out = Tensor(np.ascontiguousarray(pooled))

    def bwd(g):
        dx = np.zeros((n * c, t * h * w), dtype=g.dtype)
        rows = np.repeat(np.arange(n * c), to * ho * wo)
        np.add.at(dx, (rows, idx.reshape(-1)), g.reshape(-1))
        return (dx.reshape(vx.shape),)

    record((x,), out, bwd)
    return out, idx


def maxunpool3d(x: Tensor, idx: np.ndarray, out_thw) -> Tensor:
    """Scatter pooled values back to their recorded positions, zeros elsewhere."""
    if idx.shape != x.shape:
        raise ContractError(f"pool indices shape {idx.shape} != input shape {x.shape}")
    t, h, w = out_thw
    if idx.min() < 0 or idx.max() >= t * h * w:
        raise ContractError("pool index out of range for the requested output shape")
    n, c = x.shape[:2]
    flat = np.zeros((n * c, t * h * w), dtype=x.dtype)
    rows = np.repeat(np.arange(n * c), int(np.prod(x.shape[2:])))
    np.add.at(flat, (rows, idx.reshape(-1)), x.data.reshape(-1))
    out = Tensor(flat.reshape(n, c, t, h, w))

    def bwd(g):
        gf = g.reshape(n * c, -1)
        picked = gf[rows, idx.reshape(-1)]
        return (picked.reshape(x.data.shape),)

    record((x,), out, bwd)
    return out


def avgpool3d(x: Tensor, kernel, stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """Average pooling; padded cells are excluded from each window's mean."""
    kt, kh, kw = kernel
    st_, sh, sw = stride
    pt, ph, pw = padding
    vx = x.data
    n, c, t, h, w = vx.shape
    to = _out_extent(t, kt, st_, pt, 0)
    ho = _out_extent(h, kh, sh, ph, 1)
    wo = _out_extent(w, kw, sw, pw, 2)
    xp = _pad5(vx, pt, ph, pw)
    sums = _window_view(xp, kt, kh, kw, st_, sh, sw).sum(axis=(5, 6, 7))
    ones = np.ones((1, 1, t, h, w), dtype=vx.dtype)
    counts = _window_view(_pad5(ones, pt, ph, pw), kt, kh, kw, st_, sh, sw).sum(axis=(5, 6, 7))
    out = Tensor(sums / counts)

    def bwd(g):
        gs = g / counts
        dxp = np.zeros_like(xp)
        for it in range(kt):
            for ih in range(kh):
                for iw in range(kw):
                    dxp[:, :,
                        it:it + to * st_:st_,
                        ih:ih + ho * sh:sh,
                        iw:iw + wo * sw:sw] += gs
        dx = dxp[:, :, pt:pt + t, ph:ph + h, pw:pw + w] if (pt or ph or pw) else dxp
        return (dx,)

    record((x,), out, bwd)
    return out


def global_avg_pool_spatial(x: Tensor) -> Tensor:
    """Mean over (H, W) per (n, c, t); output is (N, C, T, 1, 1)."""
    h, w = x.shape[3], x.shape[4]
    out = Tensor(x.data.mean(axis=(3, 4), keepdims=True))

    def bwd(g):
        return (np.broadcast_to(g / (h * w), x.data.shape).copy(),)

    record((x,), out, bwd)
    return out


def _interp_matrix(isize: int, osize: int, dtype):
    """Row-stochastic 1D linear interpolation matrix (align_corners=False)."""
    m = np.zeros((osize, isize), dtype=dtype)
    s = isize / osize
    for o in range(osize):
        centre = (o + 0.5) * s - 0.5
        c0 = int(np.floor(centre))
        frac = centre - c0
        lo = min(max(c0, 0), isize - 1)
        hi = min(max(c0 + 1, 0), isize - 1)
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m


def _apply_axis(v, m, axis):
    return np.moveaxis(np.tensordot(v, m, axes=([axis], [1])), -1, axis)


def upsample_trilinear(x: Tensor, target) -> Tensor:
    """Trilinear resize of (T, H, W) to ``target`` (align_corners=False)."""
    tt, th, tw = (int(v) for v in target)
    if min(tt, th, tw) < 1:
        raise DimensionError(f"upsample target {target} must be >= 1 per axis")
    src = x.shape[2:]
    if (tt, th, tw) == tuple(src):
        return x
    mats = []
    for axis, (isz, osz) in enumerate(zip(src, (tt, th, tw))):
        mats.append(None if isz == osz else (axis + 2, _interp_matrix(isz, osz, x.dtype)))
    y = x.data
    for entry in mats:
        if entry is not None:
            y = _apply_axis(y, entry[1], entry[0])
    out = Tensor(y)

    def bwd(g):
        d = g
        for entry in reversed(mats):
            if entry is not None:
                d = _apply_axis(d, entry[1].T, entry[0])
        return (d,)

    record((x,), out, bwd)
    return out


def adam_step(store: ParameterStore, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update over every entry; zeroes gradients after."""
    for _, entry in store.items():
        entry.step += 1
        g = entry.grad
        entry.adam_m = beta1 * entry.adam_m + (1.0 - beta1) * g
        entry.adam_v = beta2 * entry.adam_v + (1.0 - beta2) * g * g
        mhat = entry.adam_m / (1.0 - beta1 ** entry.step)
        vhat = entry.adam_v / (1.0 - beta2 ** entry.step)
        entry.value.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(entry.value.dtype)
        g[...] = 0


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: tuple
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)
    bias: bool = True

    def __post_init__(self):
        if min(self.kernel) < 1:
            raise ConfigError(f"kernel extents must be >= 1, got {self.kernel}")
        if any(p >= k for p, k in zip(self.padding, self.kernel)):
            raise ConfigError(f"padding {self.padding} must stay below kernel {self.kernel}")


class Conv3d:
    """Convolution layer owning its weights in a ParameterStore.

    ``gain`` scales the 1/sqrt(fan_in) init std; use sqrt(2) for layers
    followed by relu so activation scale survives depth.
    """

    def __init__(self, store: ParameterStore, name: str, in_channels: int,
                 spec: ConvSpec, rng: SplitMix64, dtype=np.float32, gain: float = 1.0,
                 bias_init: float = 0.0):
        self.spec = spec
        fan_in = in_channels * int(np.prod(spec.kernel))
        w = rng.normal((spec.out_channels, in_channels) + tuple(spec.kernel),
                       std=gain / np.sqrt(fan_in)).astype(dtype)
        self.w = store.create(name + ".w", w)
        self.b = store.create(name + ".b",
                              np.full(spec.out_channels, bias_init, dtype=dtype)) \
            if spec.bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.w, self.b, self.spec.stride, self.spec.padding)


class ChannelNorm:
    """Layer normalization over the channel axis per (t, h, w) position."""

    def __init__(self, store: ParameterStore, name: str, channels: int, dtype=np.float32):
        self.gamma = store.create(name + ".gamma", np.ones(channels, dtype=dtype))
        self.beta = store.create(name + ".beta", np.zeros(channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, axes=(1,))
