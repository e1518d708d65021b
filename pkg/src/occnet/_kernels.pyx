# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: direct-loop convolution, 2x2 max pooling and LRN.

Single-threaded, cache-friendly loops. The numpy twin of every routine
lives in kernels_numpy; backend.py picks per kernel family at import.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def conv2d_fwd(real[:, :, :, ::1] x, kernel, bias):
    cdef int kh = kernel.shape[0], kw = kernel.shape[1]
    cdef int ci_n = kernel.shape[2], co_n = kernel.shape[3]
    cdef int ph = kh // 2, pw = kw // 2
    cdef int b_n = x.shape[0], h = x.shape[1], w = x.shape[2]
    dtype = np.asarray(x).dtype
    kt_arr = np.ascontiguousarray(np.asarray(kernel).transpose(0, 1, 3, 2), dtype=dtype)
    out_arr = np.empty((b_n, h, w, co_n), dtype=dtype)
    out_arr[:] = np.asarray(bias, dtype=dtype)
    cdef real[:, :, :, ::1] kt = kt_arr
    cdef real[:, :, :, ::1] out = out_arr
    cdef real[::1] bias_v = np.ascontiguousarray(bias, dtype=dtype)
    cdef int bb, i, j, di, dj, ii, jj, co, ci
    cdef real s
    for bb in range(b_n):
        for i in range(h):
            for di in range(kh):
                ii = i + di - ph
                if ii < 0 or ii >= h:
                    continue
                for j in range(w):
                    for dj in range(kw):
                        jj = j + dj - pw
                        if jj < 0 or jj >= w:
                            continue
                        for co in range(co_n):
                            s = 0
                            for ci in range(ci_n):
                                s = s + x[bb, ii, jj, ci] * kt[di, dj, co, ci]
                            out[bb, i, j, co] += s
    return out_arr


def conv2d_bwd(real[:, :, :, ::1] x, kernel, real[:, :, :, ::1] grad_out):
    cdef int kh = kernel.shape[0], kw = kernel.shape[1]
    cdef int ci_n = kernel.shape[2], co_n = kernel.shape[3]
    cdef int ph = kh // 2, pw = kw // 2
    cdef int b_n = x.shape[0], h = x.shape[1], w = x.shape[2]
    dtype = np.asarray(x).dtype
    k_arr = np.ascontiguousarray(kernel, dtype=dtype)
    gx_arr = np.zeros((b_n, h, w, ci_n), dtype=dtype)
    gk_arr = np.zeros((kh, kw, ci_n, co_n), dtype=dtype)
    cdef real[:, :, :, ::1] k_v = k_arr
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef real[:, :, :, ::1] gk = gk_arr
    cdef int bb, i, j, di, dj, ii, jj, co, ci
    cdef real g
    for bb in range(b_n):
        for i in range(h):
            for di in range(kh):
                ii = i + di - ph
                if ii < 0 or ii >= h:
                    continue
                for j in range(w):
                    for dj in range(kw):
                        jj = j + dj - pw
                        if jj < 0 or jj >= w:
                            continue
                        for co in range(co_n):
                            g = grad_out[bb, i, j, co]
                            for ci in range(ci_n):
                                gx[bb, ii, jj, ci] += g * k_v[di, dj, ci, co]
                                gk[di, dj, ci, co] += g * x[bb, ii, jj, ci]
    gbias = np.asarray(grad_out).sum(axis=(0, 1, 2))
    return gx_arr, gk_arr, gbias


def maxpool2x2_fwd(real[:, :, :, ::1] x):
    cdef int b_n = x.shape[0], h = x.shape[1], w = x.shape[2], c_n = x.shape[3]
    cdef int hh = h // 2, ww = w // 2
    dtype = np.asarray(x).dtype
    out_arr = np.empty((b_n, hh, ww, c_n), dtype=dtype)
    mask_arr = np.empty((b_n, hh, ww, c_n), dtype=np.int8)
    cdef real[:, :, :, ::1] out = out_arr
    cdef signed char[:, :, :, ::1] mask = mask_arr
    cdef int bb, i, j, c, di, dj, best
    cdef real v, m
    for bb in range(b_n):
        for i in range(hh):
            for j in range(ww):
                for c in range(c_n):
                    m = x[bb, 2 * i, 2 * j, c]
                    best = 0
                    for di in range(2):
                        for dj in range(2):
                            v = x[bb, 2 * i + di, 2 * j + dj, c]
                            if v > m:
                                m = v
                                best = 2 * di + dj
                    out[bb, i, j, c] = m
                    mask[bb, i, j, c] = <signed char> best
    return out_arr, mask_arr


def maxpool2x2_bwd(real[:, :, :, ::1] grad_out, signed char[:, :, :, ::1] mask):
    cdef int b_n = grad_out.shape[0], hh = grad_out.shape[1]
    cdef int ww = grad_out.shape[2], c_n = grad_out.shape[3]
    dtype = np.asarray(grad_out).dtype
    gx_arr = np.zeros((b_n, 2 * hh, 2 * ww, c_n), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef int bb, i, j, c, idx
    for bb in range(b_n):
        for i in range(hh):
            for j in range(ww):
                for c in range(c_n):
                    idx = mask[bb, i, j, c]
                    gx[bb, 2 * i + idx // 2, 2 * j + idx % 2, c] = grad_out[bb, i, j, c]
    return gx_arr


def lrn_fwd(real[:, :, :, ::1] x, int depth_radius, double k_bias, double alpha, double beta):
    cdef int b_n = x.shape[0], h = x.shape[1], w = x.shape[2], c_n = x.shape[3]
    dtype = np.asarray(x).dtype
    out_arr = np.empty((b_n, h, w, c_n), dtype=dtype)
    den_arr = np.empty((b_n, h, w, c_n), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef real[:, :, :, ::1] den = den_arr
    cdef int bb, i, j, c, lo, hi, k
    cdef double s
    for bb in range(b_n):
        for i in range(h):
            for j in range(w):
                for c in range(c_n):
                    lo = c - depth_radius
                    if lo < 0:
                        lo = 0
                    hi = c + depth_radius + 1
                    if hi > c_n:
                        hi = c_n
                    s = 0
                    for k in range(lo, hi):
                        s += x[bb, i, j, k] * x[bb, i, j, k]
                    den[bb, i, j, c] = <real> (k_bias + alpha * s)
                    out[bb, i, j, c] = <real> (x[bb, i, j, c] * (k_bias + alpha * s) ** (-beta))
    return out_arr, den_arr


def lrn_bwd(real[:, :, :, ::1] x, real[:, :, :, ::1] den, real[:, :, :, ::1] grad_out,
            int depth_radius, double k_bias, double alpha, double beta):
    cdef int b_n = x.shape[0], h = x.shape[1], w = x.shape[2], c_n = x.shape[3]
    dtype = np.asarray(x).dtype
    gx_arr = np.empty((b_n, h, w, c_n), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef int bb, i, j, c, lo, hi, k
    cdef double s, d
    for bb in range(b_n):
        for i in range(h):
            for j in range(w):
                for c in range(c_n):
                    lo = c - depth_radius
                    if lo < 0:
                        lo = 0
                    hi = c + depth_radius + 1
                    if hi > c_n:
                        hi = c_n
                    s = 0
                    for k in range(lo, hi):
                        d = den[bb, i, j, k]
                        s += grad_out[bb, i, j, k] * x[bb, i, j, k] * d ** (-beta) / d
                    gx[bb, i, j, c] = <real> (grad_out[bb, i, j, c] * den[bb, i, j, c] ** (-beta)
                                              - 2.0 * alpha * beta * x[bb, i, j, c] * s)
    return gx_arr
