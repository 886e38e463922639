"""Differentiable array operations.

All functions take/return :class:`~tmfnet.autograd.Tensor` and follow
standard conventions: cross-correlation semantics for conv2d, zero padding
for same-size outputs, half-pixel centers for bilinear resizing, and the
count-include-pad divisor k*k for stride-1 average pooling (so masked
pooling ratios cancel the divisor exactly).
"""

from __future__ import annotations

import functools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .autograd import Tensor, accumulate, as_tensor, make_output, record


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = make_output(a.data + b.data, a, b)

    def backward(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(g, b.shape))

    record(out, backward)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = make_output(a.data - b.data, a, b)

    def backward(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(-g, b.shape))

    record(out, backward)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = make_output(a.data * b.data, a, b)

    def backward(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(g * a.data, b.shape))

    record(out, backward)
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = make_output(a.data / b.data, a, b)

    def backward(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    record(out, backward)
    return out


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    out = make_output(y, x)

    def backward(g):
        accumulate(x, g * (0.5 / y))

    record(out, backward)
    return out


def absolute(x: Tensor) -> Tensor:
    out = make_output(np.abs(x.data), x)

    def backward(g):
        accumulate(x, g * np.sign(x.data))

    record(out, backward)
    return out


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    mask = x.data >= 0
    out = make_output(np.where(mask, x.data, slope * x.data).astype(x.dtype), x)

    def backward(g):
        factor = np.where(mask, x.dtype.type(1.0), x.dtype.type(slope))
        accumulate(x, g * factor)

    record(out, backward)
    return out


def clamp01(x: Tensor) -> Tensor:
    """Clamp to [0, 1]; gradients pass inside the closed interval."""
    inside = (x.data >= 0.0) & (x.data <= 1.0)
    out = make_output(np.clip(x.data, 0.0, 1.0), x)

    def backward(g):
        accumulate(x, g * inside)

    record(out, backward)
    return out


def total_sum(x: Tensor) -> Tensor:
    out = make_output(x.data.sum(dtype=x.dtype).reshape(()), x)

    def backward(g):
        accumulate(x, np.broadcast_to(g, x.shape).astype(x.dtype))

    record(out, backward)
    return out


def mean(x: Tensor) -> Tensor:
    return mul(total_sum(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# shape / layout
# ---------------------------------------------------------------------------

def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    base = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(base) or any(
            i != axis and t.shape[i] != base[i] for i in range(len(base))
        ):
            raise ValueError(
                f"concat shape mismatch along non-concat dims: {[t.shape for t in tensors]}"
            )
    out = make_output(np.concatenate([t.data for t in tensors], axis=axis), *tensors)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            accumulate(t, g[tuple(sl)])

    record(out, backward)
    return out


def pixel_shuffle(x: Tensor) -> Tensor:
    """Channel-to-space rearrangement with ratio 2: (N,4C,H,W) -> (N,C,2H,2W).

    out[n, c, 2i+di, 2j+dj] == in[n, 4c + 2*di + dj, i, j].
    """
    n, c, h, w = x.shape
    if c % 4 != 0:
        raise ValueError(f"pixel_shuffle needs channels divisible by 4, got {c}")
    y = (
        x.data.reshape(n, c // 4, 2, 2, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, c // 4, 2 * h, 2 * w)
    )
    out = make_output(np.ascontiguousarray(y), x)

    def backward(g):
        gx = (
            g.reshape(n, c // 4, h, 2, w, 2)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c, h, w)
        )
        accumulate(x, np.ascontiguousarray(gx))

    record(out, backward)
    return out


def space_to_depth(x: Tensor) -> Tensor:
    """Inverse of :func:`pixel_shuffle` (ratio 2)."""
    n, c, h, w = x.shape
    if h % 2 != 0 or w % 2 != 0:
        raise ValueError("space_to_depth needs even spatial dims")
    y = (
        x.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, 4 * c, h // 2, w // 2)
    )
    out = make_output(np.ascontiguousarray(y), x)

    def backward(g):
        gx = (
            g.reshape(n, c, 2, 2, h // 2, w // 2)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, c, h, w)
        )
        accumulate(x, np.ascontiguousarray(gx))

    record(out, backward)
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int):
    # (N, C, Hp, Wp) -> (N, C*kh*kw, oh*ow) via direct slice copies; this
    # layout needs no transposes in either the forward or backward matmuls.
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int | None = None) -> Tensor:
    """2-D cross-correlation. Default padding k//2 keeps stride-1 sizes."""
    n, ci, h, w = x.shape
    co, ciw, kh, kw = weight.shape
    if ci != ciw:
        raise ValueError(f"conv2d channel mismatch: input has {ci}, weight expects {ciw}")
    if padding is None:
        padding = kh // 2
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d output would be empty for input {h}x{w}, kernel {kh}")

    pointwise = kh == 1 and kw == 1 and padding == 0 and stride == 1
    if pointwise:
        xp = None
        cols = x.data.reshape(n, ci, h * w)
    else:
        if padding:
            xp = np.zeros((n, ci, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
            xp[:, :, padding:-padding, padding:-padding] = x.data
        else:
            xp = x.data
        cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = weight.data.reshape(co, -1)
    y = np.matmul(wmat, cols)
    if bias is not None:
        y += bias.data[:, None]
    out = make_output(y.reshape(n, co, oh, ow), x, weight, bias)

    def backward(g):
        gv = g.reshape(n, co, oh * ow)
        if bias is not None and bias.requires_grad:
            accumulate(bias, gv.sum(axis=(0, 2)))
        if weight.requires_grad:
            gw = np.matmul(gv, cols.transpose(0, 2, 1)).sum(axis=0)
            accumulate(weight, gw.reshape(weight.shape))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gv)
            if pointwise:
                accumulate(x, gcols.reshape(x.shape))
            else:
                gcols = gcols.reshape(n, ci, kh, kw, oh, ow)
                gxp = np.zeros_like(xp)
                for u in range(kh):
                    for v in range(kw):
                        gxp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride] += \
                            gcols[:, :, u, v]
                if padding:
                    gxp = gxp[:, :, padding:-padding, padding:-padding]
                accumulate(x, gxp)

    record(out, backward)
    return out


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _check_pool_kernel(k: int):
    if k < 1 or k % 2 == 0:
        raise ValueError(f"pooling kernel must be odd and >= 1, got {k}")


def _naive_box_sum(x: np.ndarray, k: int) -> np.ndarray:
    # Reference windowed sum: explicit zero padding + per-window summation.
    # Independent of the summed-area-table fast path.
    n, c, h, w = x.shape
    r = k // 2
    xp = np.zeros((n, c, h + 2 * r, w + 2 * r), dtype=x.dtype)
    xp[:, :, r:r + h, r:r + w] = x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win.sum(axis=(-2, -1), dtype=np.float64).astype(x.dtype)


def avg_pool(x: Tensor, k: int) -> Tensor:
    """Stride-1 average pooling, zero padding k//2, divisor always k*k."""
    _check_pool_kernel(k)
    out = make_output(_naive_box_sum(x.data, k) / np.asarray(k * k, dtype=x.dtype), x)

    def backward(g):
        # The box filter is symmetric, so the adjoint is the same windowed sum.
        accumulate(x, _naive_box_sum(np.ascontiguousarray(g), k) / np.asarray(k * k, dtype=x.dtype))

    record(out, backward)
    return out


def avg_pool_sat(x: Tensor, k: int) -> Tensor:
    """Summed-area-table fast path for :func:`avg_pool`; O(H*W) per channel."""
    _check_pool_kernel(k)
    out = make_output(kernels.box_sum(x.data, k) / np.asarray(k * k, dtype=x.dtype), x)

    def backward(g):
        accumulate(x, kernels.box_sum(np.ascontiguousarray(g), k) / np.asarray(k * k, dtype=x.dtype))

    record(out, backward)
    return out


def _adaptive_bounds(size: int, bins: int):
    lo = np.floor(np.arange(bins) * size / bins).astype(int)
    hi = np.ceil((np.arange(bins) + 1) * size / bins).astype(int)
    return lo, hi


def adaptive_avg_pool(x: Tensor, bins: int) -> Tensor:
    """Average pooling onto a bins x bins grid with floor/ceil boundaries."""
    n, c, h, w = x.shape
    if h < bins or w < bins:
        raise ValueError(f"adaptive_avg_pool: spatial {h}x{w} smaller than {bins} bins")
    hlo, hhi = _adaptive_bounds(h, bins)
    wlo, whi = _adaptive_bounds(w, bins)
    y = np.empty((n, c, bins, bins), dtype=x.dtype)
    for i in range(bins):
        for j in range(bins):
            y[:, :, i, j] = x.data[:, :, hlo[i]:hhi[i], wlo[j]:whi[j]].mean(axis=(2, 3))
    out = make_output(y, x)

    def backward(g):
        gx = np.zeros_like(x.data)
        for i in range(bins):
            for j in range(bins):
                area = (hhi[i] - hlo[i]) * (whi[j] - wlo[j])
                gx[:, :, hlo[i]:hhi[i], wlo[j]:whi[j]] += g[:, :, i:i + 1, j:j + 1] / area
        accumulate(x, gx)

    record(out, backward)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, kept as (N, C, 1, 1)."""
    n, c, h, w = x.shape
    out = make_output(x.data.mean(axis=(2, 3), keepdims=True), x)

    def backward(g):
        accumulate(x, np.broadcast_to(g / (h * w), x.shape).astype(x.dtype))

    record(out, backward)
    return out


def downsample_avg2(x: Tensor) -> Tensor:
    """2x2 stride-2 mean pooling (requires even spatial dims)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("downsample_avg2 needs even spatial dims")
    y = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    out = make_output(y, x)

    def backward(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * np.asarray(0.25, x.dtype)
        accumulate(x, gx)

    record(out, backward)
    return out


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int):
    """1-D bilinear weights, half-pixel centers, edges clamped. Rows sum to 1."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        i0 = int(np.floor(src))
        frac = src - i0
        m[o, min(max(i0, 0), n_in - 1)] += 1.0 - frac
        m[o, min(max(i0 + 1, 0), n_in - 1)] += frac
    return m


def bilinear_matrices(in_h: int, in_w: int, out_h: int, out_w: int):
    """Interpolation matrices shared by the op and by raw-array resizing."""
    return _interp_matrix(in_h, out_h), _interp_matrix(in_w, out_w)


def bilinear_resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resize of a (..., H, W) numpy array."""
    mh, mw = bilinear_matrices(arr.shape[-2], arr.shape[-1], out_h, out_w)
    mh = mh.astype(arr.dtype, copy=False)
    mw = mw.astype(arr.dtype, copy=False)
    return np.matmul(mh, np.matmul(arr, mw.T))


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centers (exact on constants)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("bilinear_resize target sizes must be >= 1")
    mh, mw = bilinear_matrices(x.shape[-2], x.shape[-1], out_h, out_w)
    mh = mh.astype(x.dtype, copy=False)
    mw = mw.astype(x.dtype, copy=False)
    out = make_output(np.matmul(mh, np.matmul(x.data, mw.T)), x)

    def backward(g):
        accumulate(x, np.matmul(mh.T, np.matmul(g, mw)))

    record(out, backward)
    return out


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over (N, H, W) per channel.

    Training mode normalizes with batch statistics and updates the running
    buffers in place (unbiased variance, torch convention); eval mode uses
    the running statistics. ``eps`` floors the variance in both modes.
    """
    n, c, h, w = x.shape
    cview = (1, c, 1, 1)
    if training:
        m = x.data.mean(axis=(0, 2, 3))
        v = x.data.var(axis=(0, 2, 3))
        cnt = n * h * w
        running_mean *= 1.0 - momentum
        running_mean += momentum * m
        running_var *= 1.0 - momentum
        running_var += momentum * (v * cnt / max(cnt - 1, 1))
    else:
        m = running_mean
        v = running_var
    inv_std = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - m.reshape(cview)) * inv_std.reshape(cview).astype(x.dtype)
    y = gamma.data.reshape(cview) * xhat + beta.data.reshape(cview)
    out = make_output(y.astype(x.dtype, copy=False), x, gamma, beta)

    def backward(g):
        if gamma.requires_grad:
            accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            accumulate(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gs = g * gamma.data.reshape(cview)
            if training:
                cnt = n * h * w
                mean_gs = gs.mean(axis=(0, 2, 3), keepdims=True)
                mean_gsx = (gs * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = inv_std.reshape(cview) * (gs - mean_gs - xhat * mean_gsx)
            else:
                gx = gs * inv_std.reshape(cview)
            accumulate(x, gx.astype(x.dtype, copy=False))

    record(out, backward)
    return out


# ---------------------------------------------------------------------------
# grouped per-pixel spatial fusion (hot kernel)
# ---------------------------------------------------------------------------

def group_fusion(x: Tensor, kern: Tensor, groups: int) -> Tensor:
    """Apply per-pixel grouped 3x3 kernels to grouped channels.

    x: (N, C, H, W) with C divisible by ``groups``; all channels in a group
    share that group's kernel map. kern: (N, groups*9, H, W) raw kernel
    field (no normalization). Out-of-bounds neighbors contribute zero.
    """
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ValueError(f"group_fusion: {c} channels not divisible into {groups} groups")
    kn, kc, kh, kw = kern.shape
    if kn != n or kc != groups * 9 or (kh, kw) != (h, w):
        raise ValueError(
            f"group_fusion: kernel field {kern.shape} does not match "
            f"{groups} groups over input {x.shape}"
        )
    xg = np.ascontiguousarray(x.data.reshape(n, groups, c // groups, h, w))
    kg = np.ascontiguousarray(kern.data.reshape(n, groups, 3, 3, h, w))
    y = kernels.group_fusion_forward(xg, kg)
    out = make_output(y.reshape(n, c, h, w), x, kern)

    def backward(g):
        gx, gk = kernels.group_fusion_backward(
            xg, kg, np.ascontiguousarray(g.reshape(n, groups, c // groups, h, w))
        )
        accumulate(x, gx.reshape(n, c, h, w))
        accumulate(kern, gk.reshape(n, groups * 9, h, w))

    record(out, backward)
    return out
