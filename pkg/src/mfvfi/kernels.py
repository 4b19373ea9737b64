"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled extension ``mfvfi._warp`` is used when it imports; set
``MFVFI_BACKEND=numpy`` to force the fallback. Both backends implement the
same clamped bilinear gather, so results agree to rounding.
"""

from __future__ import annotations

import os
from typing import Tuple

import numpy as np


def _coords(pos: np.ndarray, n: int):
    """Clamp sample positions and return corner indices, fractions and an in-range mask."""
    inside = ((pos >= 0) & (pos <= n - 1)).astype(pos.dtype)
    c = np.clip(pos, 0, n - 1)
    i0 = np.minimum(np.floor(c).astype(np.int64), n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, (c - i0).astype(pos.dtype), inside


def _corners(alpha, beta):
    B, M, H, W = alpha.shape
    xs = np.arange(W, dtype=alpha.dtype)[None, None, None, :] + alpha
    ys = np.arange(H, dtype=alpha.dtype)[None, None, :, None] + beta
    x0, x1, fx, inx = _coords(xs, W)
    y0, y1, fy, iny = _coords(ys, H)
    idx = [(y0 * W + x0), (y0 * W + x1), (y1 * W + x0), (y1 * W + x1)]
    wts = [(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx]
    return idx, wts, fx, fy, inx, iny


def _gather(flat: np.ndarray, idx: np.ndarray) -> np.ndarray:
    # flat: B, C, HW; idx: B, M, H, W  ->  B, C, M, H, W
    B, C = flat.shape[:2]
    g = np.take_along_axis(flat, idx.reshape(B, 1, -1), axis=2)
    return g.reshape((B, C) + idx.shape[1:])


def warp_forward_numpy(frame, alpha, beta, omega) -> np.ndarray:
    B, C, H, W = frame.shape
    flat = frame.reshape(B, C, H * W)
    idx, wts, *_ = _corners(alpha, beta)
    acc = np.zeros((B, C) + alpha.shape[1:], dtype=frame.dtype)
    for i, w in zip(idx, wts):
        acc += w[:, None] * _gather(flat, i)
    return (acc * omega[:, None]).sum(axis=2)


def warp_backward_numpy(frame, alpha, beta, omega, grad_out) -> Tuple[np.ndarray, ...]:
    B, C, H, W = frame.shape
    flat = frame.reshape(B, C, H * W)
    idx, wts, fx, fy, inx, iny = _corners(alpha, beta)
    v00, v01, v10, v11 = (_gather(flat, i) for i in idx)
    g = grad_out[:, :, None]
    sample = wts[0][:, None] * v00 + wts[1][:, None] * v01 + wts[2][:, None] * v10 + wts[3][:, None] * v11
    g_omega = (g * sample).sum(axis=1)
    dx = (1 - fy)[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10)
    dy = (1 - fx)[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01)
    g_alpha = omega * (g * dx).sum(axis=1) * inx
    g_beta = omega * (g * dy).sum(axis=1) * iny

    gw = g * omega[:, None]  # B, C, M, H, W
    base = (np.arange(B)[:, None] * C + np.arange(C)[None, :]) * (H * W)  # B, C
    g_frame = np.zeros(B * C * H * W, dtype=np.float64)
    for i, w in zip(idx, wts):
        pos = base[:, :, None] + i.reshape(B, 1, -1)
        g_frame += np.bincount(pos.ravel(), weights=(gw * w[:, None]).reshape(B, C, -1).ravel(),
                               minlength=B * C * H * W)
    return (g_frame.reshape(B, C, H, W).astype(frame.dtype), g_alpha, g_beta, g_omega)


try:
    from ._warp import warp_backward as _warp_backward_c, warp_forward as _warp_forward_c
    HAVE_COMPILED = True
except ImportError:  # pragma: no cover - depends on build environment
    HAVE_COMPILED = False

_requested = os.environ.get("MFVFI_BACKEND", "").strip().lower()
BACKEND = "cython" if HAVE_COMPILED and _requested != "numpy" else "numpy"


def _contig(*arrays):
    dtype = np.result_type(*arrays)
    return [np.ascontiguousarray(a, dtype=dtype) for a in arrays]


def warp_forward(frame, alpha, beta, omega, backend: str = None) -> np.ndarray:
    """Clamped bilinear multi-flow gather: ``sum_k omega_k * frame(x + alpha_k, y + beta_k)``."""
    args = _contig(frame, alpha, beta, omega)
    if (backend or BACKEND) == "cython":
        return np.asarray(_warp_forward_c(*args))
    return warp_forward_numpy(*args)


def warp_backward(frame, alpha, beta, omega, grad_out, backend: str = None):
    """Return gradients w.r.t. ``(frame, alpha, beta, omega)``."""
    args = _contig(frame, alpha, beta, omega, grad_out)
    if (backend or BACKEND) == "cython":
        return tuple(np.asarray(a) for a in _warp_backward_c(*args))
    return warp_backward_numpy(*args)


def available_backends():
    return ["cython", "numpy"] if HAVE_COMPILED else ["numpy"]
