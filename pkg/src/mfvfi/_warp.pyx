# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled multi-flow warp kernels (forward and vector-Jacobian product)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

ctypedef fused real:
    float
    double


cdef inline void _coords(real pos, Py_ssize_t n, Py_ssize_t* i0, Py_ssize_t* i1,
                         real* frac, real* inside) noexcept nogil:
    cdef real c = pos
    inside[0] = 1
    if c <= 0:
        c = 0
        if pos < 0:
            inside[0] = 0
    elif c >= n - 1:
        c = n - 1
        if pos > n - 1:
            inside[0] = 0
    cdef Py_ssize_t k = <Py_ssize_t>floor(c)
    if k > n - 1:
        k = n - 1
    i0[0] = k
    i1[0] = k + 1 if k + 1 < n else n - 1
    frac[0] = c - k


def warp_forward(real[:, :, :, ::1] frame, real[:, :, :, ::1] alpha,
                 real[:, :, :, ::1] beta, real[:, :, :, ::1] omega):
    cdef Py_ssize_t B = frame.shape[0], C = frame.shape[1]
    cdef Py_ssize_t H = frame.shape[2], W = frame.shape[3]
    cdef Py_ssize_t M = alpha.shape[1]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((B, C, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, m, y, x, c, x0, x1, y0, y1
    cdef real fx, fy, inx, iny, w00, w01, w10, w11, wk
    with nogil:
        for b in range(B):
            for m in range(M):
                for y in range(H):
                    for x in range(W):
                        wk = omega[b, m, y, x]
                        _coords(x + alpha[b, m, y, x], W, &x0, &x1, &fx, &inx)
                        _coords(y + beta[b, m, y, x], H, &y0, &y1, &fy, &iny)
                        w00 = wk * (1 - fy) * (1 - fx)
                        w01 = wk * (1 - fy) * fx
                        w10 = wk * fy * (1 - fx)
                        w11 = wk * fy * fx
                        for c in range(C):
                            out[b, c, y, x] += (w00 * frame[b, c, y0, x0] + w01 * frame[b, c, y0, x1]
                                                + w10 * frame[b, c, y1, x0] + w11 * frame[b, c, y1, x1])
    return out_arr


def warp_backward(real[:, :, :, ::1] frame, real[:, :, :, ::1] alpha,
                  real[:, :, :, ::1] beta, real[:, :, :, ::1] omega,
                  real[:, :, :, ::1] grad_out):
    cdef Py_ssize_t B = frame.shape[0], C = frame.shape[1]
    cdef Py_ssize_t H = frame.shape[2], W = frame.shape[3]
    cdef Py_ssize_t M = alpha.shape[1]
    dtype = np.float32 if real is float else np.float64
    gf_arr = np.zeros((B, C, H, W), dtype=dtype)
    ga_arr = np.zeros((B, M, H, W), dtype=dtype)
    gb_arr = np.zeros((B, M, H, W), dtype=dtype)
    gw_arr = np.zeros((B, M, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] gf = gf_arr
    cdef real[:, :, :, ::1] ga = ga_arr
    cdef real[:, :, :, ::1] gb = gb_arr
    cdef real[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, m, y, x, c, x0, x1, y0, y1
    cdef real fx, fy, inx, iny, wk, g, v00, v01, v10, v11, sx, sy, sw
    with nogil:
        for b in range(B):
            for m in range(M):
                for y in range(H):
                    for x in range(W):
                        wk = omega[b, m, y, x]
                        _coords(x + alpha[b, m, y, x], W, &x0, &x1, &fx, &inx)
                        _coords(y + beta[b, m, y, x], H, &y0, &y1, &fy, &iny)
                        sx = 0
                        sy = 0
                        sw = 0
                        for c in range(C):
                            g = grad_out[b, c, y, x]
                            v00 = frame[b, c, y0, x0]
                            v01 = frame[b, c, y0, x1]
                            v10 = frame[b, c, y1, x0]
                            v11 = frame[b, c, y1, x1]
                            sw += g * ((1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11))
                            sx += g * ((1 - fy) * (v01 - v00) + fy * (v11 - v10))
                            sy += g * ((1 - fx) * (v10 - v00) + fx * (v11 - v01))
                            g = g * wk
                            gf[b, c, y0, x0] += g * (1 - fy) * (1 - fx)
                            gf[b, c, y0, x1] += g * (1 - fy) * fx
                            gf[b, c, y1, x0] += g * fy * (1 - fx)
                            gf[b, c, y1, x1] += g * fy * fx
                        gw[b, m, y, x] = sw
                        ga[b, m, y, x] = wk * sx * inx
                        gb[b, m, y, x] = wk * sy * iny
    return gf_arr, ga_arr, gb_arr, gw_arr
