"""Differentiable array operators used by the network.

Layout is channel-first throughout: ``[B, C, H, W]`` for images and
``[B, C, T, H, W]`` for clips.
"""

from __future__ import annotations

import functools
from typing import Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_result

IntTuple = Tuple[int, ...]


def _tuple(v, n: int) -> IntTuple:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(x) for x in v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


def _conv_nd(x: Tensor, kernel: Tensor, bias: Tensor, stride, padding, nd: int) -> Tensor:
    if x.ndim != nd + 2 or kernel.ndim != nd + 2:
        raise ShapeError(f"conv{nd}d expects rank-{nd + 2} input and kernel, "
                         f"got {x.shape} and {kernel.shape}")
    stride = _tuple(stride, nd)
    padding = _tuple(padding, nd)
    B, C = x.shape[:2]
    O, Ck = kernel.shape[:2]
    ksize = kernel.shape[2:]
    if C != Ck:
        raise ShapeError(f"conv{nd}d: input has {C} channels but kernel expects {Ck} "
                         f"(input {x.shape}, kernel {kernel.shape})")
    if bias.shape != (O,):
        raise ShapeError(f"conv{nd}d: bias shape {bias.shape} != ({O},)")
    if any(k % 2 == 0 for k in ksize):
        raise ShapeError(f"conv{nd}d: kernel extents must be odd, got {ksize}")
    if any(s < 1 for s in stride) or any(p < 0 for p in padding):
        raise ValueError(f"conv{nd}d: invalid stride {stride} or padding {padding}")
    spatial = x.shape[2:]
    padded = tuple(n + 2 * p for n, p in zip(spatial, padding))
    if any(n < k for n, k in zip(padded, ksize)):
        raise ShapeError(f"conv{nd}d: padded extent {padded} smaller than kernel {ksize}")
    out_sp = tuple((n - k) // s + 1 for n, k, s in zip(padded, ksize, stride))

    xd = x.data
    if any(padding):
        xd = np.pad(xd, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
    axes = tuple(range(2, 2 + nd))
    win = sliding_window_view(xd, ksize, axis=axes)
    win = win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]
    # win: B, C, *out_sp, *ksize  ->  cols: (C * prod(ksize), B * prod(out_sp))
    perm = (1,) + tuple(range(2 + nd, 2 + 2 * nd)) + (0,) + axes
    cols = win.transpose(perm).reshape(C * int(np.prod(ksize)), -1)
    wmat = kernel.data.reshape(O, -1)
    out = wmat @ cols
    out = out.reshape((O, B) + out_sp).swapaxes(0, 1) + bias.data.reshape((1, O) + (1,) * nd)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.swapaxes(0, 1).reshape(O, -1)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g.sum(axis=(0,) + axes) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape((C,) + ksize + (B,) + out_sp)
            gxp = np.zeros((B, C) + padded, dtype=g.dtype)
            for offs in np.ndindex(*ksize):
                region = tuple(slice(o, o + s * (n - 1) + 1, s)
                               for o, s, n in zip(offs, stride, out_sp))
                gxp[(slice(None), slice(None)) + region] += gcols[(slice(None),) + offs].swapaxes(0, 1)
            crop = tuple(slice(p, p + n) for p, n in zip(padding, spatial))
            gx = np.ascontiguousarray(gxp[(slice(None), slice(None)) + crop])
        return gx, gk, gb
    return make_result(out, (x, kernel, bias), bw)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride=1, padding=0) -> Tensor:
    """Zero-padded 2D cross-correlation plus bias."""
    return _conv_nd(x, kernel, bias, stride, padding, 2)


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor, stride=1, padding=0) -> Tensor:
    """Zero-padded 3D cross-correlation plus bias over ``[B, C, T, H, W]``."""
    return _conv_nd(x, kernel, bias, stride, padding, 3)


@functools.lru_cache(maxsize=256)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation operator of shape ``(n_out, n_in)``.

    Source coordinates are clamped to ``[0, n_in - 1]``.
    """
    if n_out == 1:
        src = np.zeros(1)
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    src = np.clip(src, 0, n_in - 1)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, i1), f)
    m.setflags(write=False)
    return m


def separable_linear(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply ``rows @ X @ cols.T`` to the trailing two axes of ``x``."""
    rows = rows.astype(x.dtype, copy=False)
    cols = cols.astype(x.dtype, copy=False)
    out = np.matmul(np.matmul(rows, x.data), cols.T)
    return make_result(out, (x,), lambda g: (np.matmul(np.matmul(rows.T, g), cols),))


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resampling with border clamping."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    if x.ndim < 2:
        raise ShapeError(f"bilinear_resize needs at least 2 axes, got {x.shape}")
    h, w = x.shape[-2:]
    return separable_linear(x, interp_matrix(h, out_h), interp_matrix(w, out_w))


def upsample2(x: Tensor) -> Tensor:
    return bilinear_resize(x, 2 * x.shape[-2], 2 * x.shape[-1])


def avg_pool2(x: Tensor) -> Tensor:
    """Mean of each 2x2 block over the trailing two axes."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial extents, got {h}x{w}")
    d = x.data
    # fixed summation order so results are reproducible element by element
    out = (d[..., 0::2, 0::2] + d[..., 0::2, 1::2] + d[..., 1::2, 0::2] + d[..., 1::2, 1::2]) * 0.25

    def bw(g):
        gx = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25
        return (gx.astype(g.dtype, copy=False),)
    return make_result(out, (x,), bw)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    axis = axis % x.ndim
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return make_result(out, (x,), bw)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with one slope per channel (axis 1)."""
    if slope.shape != (x.shape[1],):
        raise ShapeError(f"prelu slope shape {slope.shape} != ({x.shape[1]},)")
    s = slope.data.reshape((1, -1) + (1,) * (x.ndim - 2))
    pos = x.data > 0
    out = np.where(pos, x.data, s * x.data)

    def bw(g):
        gx = np.where(pos, g, g * s) if x.requires_grad else None
        gs = None
        if slope.requires_grad:
            red = (0,) + tuple(range(2, x.ndim))
            gs = np.where(pos, 0, g * x.data).sum(axis=red)
        return gx, gs
    return make_result(out, (x, slope), bw)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) slice to zero mean and unit variance."""
    if x.ndim < 3:
        raise ShapeError(f"instance_norm needs [B, C, ...], got {x.shape}")
    axes = tuple(range(2, x.ndim))
    n = int(np.prod(x.shape[2:]))
    if n < 2:
        raise ShapeError(f"instance_norm needs at least 2 elements per slice, got {x.shape}")
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gy = (g * out).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - out * gy),)
    return make_result(out, (x,), bw)


def reflect_pad_index(i: int, n: int) -> int:
    """Index into ``[0, n)`` for position ``i`` under mirror (no edge repeat) padding."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = abs(i) % period
    return period - i if i >= n else i


def _filter_matrix(n: int, taps: Sequence[float], step_in: int = 1) -> np.ndarray:
    """Dense ``(n, n)`` matrix of a centered FIR filter with mirror borders."""
    half = len(taps) // 2
    m = np.zeros((n, n))
    for i in range(n):
        for t, c in enumerate(taps):
            m[i, reflect_pad_index(i + t - half, n)] += c
    return m


BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@functools.lru_cache(maxsize=64)
def pyr_down_matrix(n: int) -> np.ndarray:
    """Binomial blur then decimation by two, as an ``(n/2, n)`` operator."""
    m = np.ascontiguousarray(_filter_matrix(n, BINOMIAL5)[::2])
    m.setflags(write=False)
    return m


@functools.lru_cache(maxsize=64)
def pyr_up_matrix(n_coarse: int) -> np.ndarray:
    """Zero insertion then binomial blur (gain 2 per axis), as a ``(2n, n)`` operator."""
    n = 2 * n_coarse
    insert = np.zeros((n, n_coarse))
    insert[::2] = np.eye(n_coarse)
    m = 2.0 * _filter_matrix(n, BINOMIAL5) @ insert
    m.setflags(write=False)
    return m


def pyr_down(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    return separable_linear(x, pyr_down_matrix(h), pyr_down_matrix(w))


def pyr_up(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    return separable_linear(x, pyr_up_matrix(h), pyr_up_matrix(w))


def fold_time(x: Tensor) -> Tensor:
    """``[B, C, T, H, W] -> [B, C*T, H, W]``."""
    b, c, t, h, w = x.shape
    return as_tensor(x).reshape((b, c * t, h, w))
