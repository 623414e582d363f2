"""Convolutional building blocks with hand-written backward rules.

All blocks operate on [N, C, H, W] tensors. Convolution uses the
cross-correlation convention. Downsampling is 2x2 max pooling, upsampling a
2x2 stride-2 transposed convolution (the exact adjoint of the stride-2
convolution), and the final upscale of each network head is a depth-to-space
rearrangement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .autodiff import Tensor, make_op
from .errors import ShapeError


@dataclass
class Conv2dParams:
    weight: Tensor  # [C_out, C_in, k, k]
    bias: Tensor  # [C_out]
    stride: int = 1
    padding: int = 0


@dataclass
class CAParams:
    """Squeeze-excitation gating parameters for one attention layer."""

    w_reduce: Tensor  # [C/r, C]
    b_reduce: Tensor  # [C/r]
    w_expand: Tensor  # [C, C/r]
    b_expand: Tensor  # [C]
    reduction: int


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def attention_reduction(channels: int) -> int:
    """Reduction ratio: 16, clamped so the bottleneck keeps >= 4 units."""
    r = min(16, max(1, channels // 4))
    while channels % r:
        r -= 1
    return r


# Above this many bytes the lowered patch matrix is not materialized and
# convolution falls back to a tap loop (full-frame inference stays lean).
_COL_BYTES_LIMIT = 256 * 2**20


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlate x [N,Cin,H,W] with p.weight [Cout,Cin,k,k] plus bias.

    Output spatial dims follow (H + 2*padding - k) // stride + 1.
    """
    w, b, stride, padding = p.weight, p.bias, int(p.stride), int(p.padding)
    n, cin, h, wdt = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if b.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.data.shape} != ({cout},)")
    if h + 2 * padding < kh or wdt + 2 * padding < kw:
        raise ShapeError("conv2d: spatial dims smaller than kernel after padding")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wdt + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d: nonpositive output dims")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data

    def tap_slices(i, j):
        return (
            slice(i, i + stride * (ho - 1) + 1, stride),
            slice(j, j + stride * (wo - 1) + 1, stride),
        )

    col_bytes = n * ho * wo * cin * kh * kw * 8
    if col_bytes <= _COL_BYTES_LIMIT:
        # one gemm over the lowered patch matrix
        col = np.empty((n, ho, wo, cin, kh, kw))
        for i in range(kh):
            for j in range(kw):
                rows, cols = tap_slices(i, j)
                col[:, :, :, :, i, j] = xp[:, :, rows, cols].transpose(0, 2, 3, 1)
        cmat = col.reshape(n * ho * wo, cin * kh * kw)
        wmat = w.data.reshape(cout, cin * kh * kw)
        out = (cmat @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out) + b.data[None, :, None, None]

        def backward(g):
            gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
            gb = g.sum(axis=(0, 2, 3))
            gw = (gm.T @ cmat).reshape(w.data.shape)
            gx = None
            if x.requires_grad:
                gcol = (gm @ wmat).reshape(n, ho, wo, cin, kh, kw)
                simple = not padding and stride == 1 and kh == 1 and kw == 1
                gxp = None if simple else np.zeros((n, cin, h + 2 * padding, wdt + 2 * padding))
                if gxp is None:
                    gx = np.ascontiguousarray(gcol[:, :, :, :, 0, 0].transpose(0, 3, 1, 2))
                else:
                    for i in range(kh):
                        for j in range(kw):
                            rows, cols = tap_slices(i, j)
                            gxp[:, :, rows, cols] += gcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    gx = gxp[:, :, padding : padding + h, padding : padding + wdt] if padding else gxp
            return gx, gw, gb

        return make_op(out, (x, w, b), backward)

    # tap-loop path: O(input) extra memory
    acc = np.zeros((n, ho, wo, cout))
    for i in range(kh):
        for j in range(kw):
            rows, cols = tap_slices(i, j)
            acc += np.tensordot(xp[:, :, rows, cols], w.data[:, :, i, j], axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2)) + b.data[None, :, None, None]

    def backward_taps(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # [N,Ho,Wo,Cout]
        gb = g.sum(axis=(0, 2, 3))
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                rows, cols = tap_slices(i, j)
                gw[:, :, i, j] = np.tensordot(gm, xp[:, :, rows, cols], axes=([0, 1, 2], [0, 2, 3]))
                if gxp is not None:
                    contrib = np.tensordot(gm, w.data[:, :, i, j], axes=([3], [0]))
                    gxp[:, :, rows, cols] += contrib.transpose(0, 3, 1, 2)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding : padding + h, padding : padding + wdt] if padding else gxp
        return gx, gw, gb

    return make_op(out, (x, w, b), backward_taps)


def transposed_conv2(x: Tensor, p: Conv2dParams) -> Tensor:
    """2x upsampling: exact adjoint of a stride-2 2x2 convolution.

    Weight layout is [C_in, C_out, 2, 2]; output is [N, C_out, 2H, 2W].
    """
    w, b = p.weight, p.bias
    n, cin, h, wdt = x.data.shape
    cin_w, cout, kh, kw = w.data.shape
    if (kh, kw) != (2, 2):
        raise ShapeError("transposed_conv2: kernel must be 2x2")
    if cin != cin_w:
        raise ShapeError(f"transposed_conv2: input has {cin} channels, weight expects {cin_w}")

    t = np.tensordot(x.data, w.data, axes=([1], [0]))  # [N,H,W,Cout,2,2]
    out = t.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * wdt)
    out = out + b.data[None, :, None, None]

    def backward(g):
        gv = g.reshape(n, cout, h, 2, wdt, 2).transpose(0, 2, 4, 1, 3, 5)  # [N,H,W,Cout,2,2]
        gx = np.tensordot(gv, w.data, axes=([3, 4, 5], [1, 2, 3]))  # [N,H,W,Cin]
        gw = np.tensordot(x.data, gv, axes=([0, 2, 3], [0, 1, 2]))  # [Cin,Cout,2,2]
        gb = g.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), gw, gb

    return make_op(np.ascontiguousarray(out), (x, w, b), backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max; gradient routes to the first max per tile."""
    n, c, h, wdt = x.data.shape
    if h % 2 or wdt % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got {h}x{wdt}")
    ho, wo = h // 2, wdt // 2
    win = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)  # argmax takes the first of tied maxima
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((n, c, ho, wo, 4))
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, wdt)
        return (gx,)

    return make_op(np.ascontiguousarray(out), (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data >= 0, 1.0, slope)
    return make_op(x.data * factor, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return make_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def depth_to_space(x: Tensor, s: int) -> Tensor:
    """Pixel shuffle: [N, C*s*s, H, W] -> [N, C, s*H, s*W].

    The s*s channel group of each output channel fills its s x s block in
    row-major order.
    """
    n, c_in, h, wdt = x.data.shape
    if c_in % (s * s):
        raise ShapeError(f"depth_to_space: {c_in} channels not divisible by {s * s}")
    c = c_in // (s * s)
    out = (
        x.data.reshape(n, c, s, s, h, wdt)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, c, s * h, s * wdt)
    )

    def backward(g):
        gx = (
            g.reshape(n, c, h, s, wdt, s)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c_in, h, wdt)
        )
        return (np.ascontiguousarray(gx),)

    return make_op(np.ascontiguousarray(out), (x,), backward)


def space_to_depth(x: Tensor, s: int) -> Tensor:
    """Inverse pixel shuffle: [N, C, s*H, s*W] -> [N, C*s*s, H, W]."""
    n, c, hs, ws = x.data.shape
    if hs % s or ws % s:
        raise ShapeError(f"space_to_depth: dims {hs}x{ws} not divisible by {s}")
    h, wdt = hs // s, ws // s
    out = (
        x.data.reshape(n, c, h, s, wdt, s)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * s * s, h, wdt)
    )

    def backward(g):
        gx = (
            g.reshape(n, c, s, s, h, wdt)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, c, hs, ws)
        )
        return (np.ascontiguousarray(gx),)

    return make_op(np.ascontiguousarray(out), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C] spatial mean."""
    n, c, h, wdt = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * wdt), x.data.shape).copy(),)

    return make_op(out, (x,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """[N, Cin] @ w.T + b with w [Cout, Cin]."""
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"linear: {x.data.shape[1]} features vs weight {w.data.shape}")
    out = x.data @ w.data.T + b.data[None, :]

    def backward(g):
        return g @ w.data, g.T @ x.data, g.sum(axis=0)

    return make_op(out, (x, w, b), backward)


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each [n, c] slice of x by the scalar gate s[n, c]."""
    if s.data.shape != x.data.shape[:2]:
        raise ShapeError(f"channel_scale: gate {s.data.shape} vs input {x.data.shape}")
    out = x.data * s.data[:, :, None, None]

    def backward(g):
        return g * s.data[:, :, None, None], (g * x.data).sum(axis=(2, 3))

    return make_op(out, (x, s), backward)


def channel_attention(x: Tensor, p: CAParams) -> Tensor:
    """Squeeze-excitation recalibration: gate each channel by a (0,1) factor.

    The gate is sigmoid(W_e . relu(W_r . gap(x) + b_r) + b_e) computed per
    sample from the global average pool, then broadcast over H x W.
    """
    c = x.data.shape[1]
    if p.w_reduce.data.shape[1] != c:
        raise ShapeError(
            f"channel_attention: input has {c} channels, weights expect {p.w_reduce.data.shape[1]}"
        )
    pooled = global_avg_pool(x)
    hidden = relu(linear(pooled, p.w_reduce, p.b_reduce))
    gate = sigmoid(linear(hidden, p.w_expand, p.b_expand))
    return channel_scale(x, gate)


def concat_channels(tensors: list[Tensor]) -> Tensor:
    """Concatenate [N, C_i, H, W] tensors along the channel axis."""
    base = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape[0] != base[0] or t.data.shape[2:] != base[2:]:
            raise ShapeError("concat_channels: batch/spatial dims differ")
    splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return make_op(out, tuple(tensors), backward)


def _up2_taps(size: int):
    """Source indices and interpolation weights for a 2x bilinear upsample."""
    coords = (np.arange(2 * size) + 0.5) / 2.0 - 0.5
    lo = np.floor(coords).astype(int)
    frac = coords - lo
    i0 = np.clip(lo, 0, size - 1)
    i1 = np.clip(lo + 1, 0, size - 1)
    return i0, i1, frac


def bilinear_up2(x: Tensor) -> Tensor:
    """2x bilinear upsample of [N, C, H, W] (half-pixel-centered grid)."""
    n, c, h, wdt = x.data.shape
    r0, r1, rf = _up2_taps(h)
    c0, c1, cf = _up2_taps(wdt)
    rows = x.data[:, :, r0, :] * (1 - rf)[None, None, :, None] + x.data[:, :, r1, :] * rf[None, None, :, None]
    out = rows[:, :, :, c0] * (1 - cf)[None, None, None, :] + rows[:, :, :, c1] * cf[None, None, None, :]

    def backward(g):
        grows = np.zeros((n, c, 2 * h, wdt))
        np.add.at(grows.transpose(3, 0, 1, 2), c0, (g * (1 - cf)[None, None, None, :]).transpose(3, 0, 1, 2))
        np.add.at(grows.transpose(3, 0, 1, 2), c1, (g * cf[None, None, None, :]).transpose(3, 0, 1, 2))
        gx = np.zeros_like(x.data)
        np.add.at(gx.transpose(2, 0, 1, 3), r0, (grows * (1 - rf)[None, None, :, None]).transpose(2, 0, 1, 3))
        np.add.at(gx.transpose(2, 0, 1, 3), r1, (grows * rf[None, None, :, None]).transpose(2, 0, 1, 3))
        return (gx,)

    return make_op(np.ascontiguousarray(out), (x,), backward)


def bilinear_up2_array(x: np.ndarray) -> np.ndarray:
    """Plain-array twin of :func:`bilinear_up2` for [H, W] planes."""
    h, wdt = x.shape
    r0, r1, rf = _up2_taps(h)
    c0, c1, cf = _up2_taps(wdt)
    rows = x[r0, :] * (1 - rf)[:, None] + x[r1, :] * rf[:, None]
    return rows[:, c0] * (1 - cf)[None, :] + rows[:, c1] * cf[None, :]


def clamp01(x: Tensor) -> Tensor:
    """Inference-only clamp to [0, 1]; no gradient is defined."""
    return Tensor(np.clip(x.data, 0.0, 1.0))
