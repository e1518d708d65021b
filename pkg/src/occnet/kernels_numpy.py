"""Numpy implementations of the hot kernels.

Convolutions are expressed as one GEMM per kernel tap, which keeps peak
memory at one input-sized temporary and lets BLAS do the arithmetic.
All tensors are NHWC: (batch, height, width, channels).
"""

import numpy as np


def _pad_spatial(x, ph, pw):
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2 * ph, w + 2 * pw, c), dtype=x.dtype)
    xp[:, ph:ph + h, pw:pw + w, :] = x
    return xp


def conv2d_fwd(x, kernel, bias):
    """SAME convolution, stride 1. kernel: (kh, kw, c_in, c_out)."""
    kh, kw, c_in, c_out = kernel.shape
    ph, pw = kh // 2, kw // 2
    b, h, w, _ = x.shape
    xp = _pad_spatial(x, ph, pw)
    out = np.empty((b, h, w, c_out), dtype=x.dtype)
    out[:] = bias
    acc = out.reshape(-1, c_out)
    for di in range(kh):
        for dj in range(kw):
            acc += xp[:, di:di + h, dj:dj + w, :].reshape(-1, c_in) @ kernel[di, dj]
    return out


def conv2d_bwd(x, kernel, grad_out):
    """Gradients of conv2d_fwd. Returns (grad_x, grad_kernel, grad_bias)."""
    kh, kw, c_in, c_out = kernel.shape
    ph, pw = kh // 2, kw // 2
    b, h, w, _ = x.shape
    xp = _pad_spatial(x, ph, pw)
    gxp = np.zeros_like(xp)
    go = grad_out.reshape(-1, c_out)
    gk = np.empty_like(kernel)
    for di in range(kh):
        for dj in range(kw):
            sl = xp[:, di:di + h, dj:dj + w, :].reshape(-1, c_in)
            gk[di, dj] = sl.T @ go
            gxp[:, di:di + h, dj:dj + w, :] += (go @ kernel[di, dj].T).reshape(b, h, w, c_in)
    gx = gxp[:, ph:ph + h, pw:pw + w, :].copy()
    gbias = grad_out.sum(axis=(0, 1, 2))
    return gx, gk, gbias


def tconv2d_fwd(x, kernel, bias):
    """Fractionally strided 3x3 convolution: (b, n, m, c_in) -> (b, 2n, 2m, c_out).

    Defined as the adjoint of a stride-2 SAME convolution from the output
    grid back to the input grid (output size exactly doubled).
    """
    kh, kw, c_in, c_out = kernel.shape
    b, n, m, _ = x.shape
    x2 = x.reshape(-1, c_in)
    vp = np.zeros((b, 2 * n + 2, 2 * m + 2, c_out), dtype=x.dtype)
    for di in range(kh):
        for dj in range(kw):
            vp[:, di:di + 2 * n:2, dj:dj + 2 * m:2, :] += (x2 @ kernel[di, dj]).reshape(b, n, m, c_out)
    out = vp[:, 1:1 + 2 * n, 1:1 + 2 * m, :].copy()
    out += bias
    return out


def tconv2d_bwd(x, kernel, grad_out):
    """Gradients of tconv2d_fwd. Returns (grad_x, grad_kernel, grad_bias)."""
    kh, kw, c_in, c_out = kernel.shape
    b, n, m, _ = x.shape
    gvp = np.zeros((b, 2 * n + 2, 2 * m + 2, c_out), dtype=x.dtype)
    gvp[:, 1:1 + 2 * n, 1:1 + 2 * m, :] = grad_out
    x2 = x.reshape(-1, c_in)
    gx = np.zeros_like(x)
    gx2 = gx.reshape(-1, c_in)
    gk = np.empty_like(kernel)
    for di in range(kh):
        for dj in range(kw):
            sl = gvp[:, di:di + 2 * n:2, dj:dj + 2 * m:2, :].reshape(-1, c_out)
            gk[di, dj] = x2.T @ sl
            gx2 += sl @ kernel[di, dj].T
    gbias = grad_out.sum(axis=(0, 1, 2))
    return gx, gk, gbias


def maxpool2x2_fwd(x):
    """2x2 max pooling, stride 2. Returns (output, argmax mask).

    The mask holds the winner's row-major index within each window
    (0..3); ties go to the first maximum, which makes routing in the
    backward pass deterministic.
    """
    b, h, w, c = x.shape
    win = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h // 2, w // 2, c, 4)
    mask = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, mask[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, mask


def maxpool2x2_bwd(grad_out, mask):
    b, hh, ww, c = grad_out.shape
    g = np.zeros((b, hh, ww, c, 4), dtype=grad_out.dtype)
    np.put_along_axis(g, mask[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    return g.reshape(b, hh, ww, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, 2 * hh, 2 * ww, c)


def _channel_window_sum(x, radius):
    """Sliding sum over the channel axis, window +-radius clipped at edges."""
    c = x.shape[-1]
    cs = np.cumsum(x, axis=-1)
    zeros = np.zeros(x.shape[:-1] + (1,), dtype=x.dtype)
    cs = np.concatenate([zeros, cs], axis=-1)
    hi = np.minimum(np.arange(c) + radius + 1, c)
    lo = np.maximum(np.arange(c) - radius, 0)
    return cs[..., hi] - cs[..., lo]


def lrn_fwd(x, depth_radius, k_bias, alpha, beta):
    """Local response normalization across channels.

    out = x / (k_bias + alpha * sum_{window} x^2) ** beta
    Returns (out, denom) with denom cached for the backward pass.
    """
    ssum = _channel_window_sum(x * x, depth_radius)
    denom = k_bias + alpha * ssum
    out = x * denom ** (-beta)
    return out, denom


def lrn_bwd(x, denom, grad_out, depth_radius, k_bias, alpha, beta):
    d_pow = denom ** (-beta)
    inner = grad_out * x * d_pow / denom
    back = _channel_window_sum(inner, depth_radius)
    return grad_out * d_pow - 2.0 * alpha * beta * x * back
