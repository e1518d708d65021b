"""Differentiable primitive layers over NHWC numpy tensors.

Each primitive is a pure function of its inputs plus explicit parameter
objects; forward passes return whatever cache the matching backward
needs. Shapes follow (batch, height, width, channels) throughout.
"""

from dataclasses import dataclass, field

import numpy as np

from . import backend


@dataclass
class ConvParams:
    """Convolution kernel (kh, kw, c_in, c_out) plus per-output-channel bias."""

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        kh, kw = self.kernel.shape[:2]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
        if self.bias.shape != (self.kernel.shape[3],):
            raise ValueError("bias length must equal the output channel count")


@dataclass
class BatchNormParams:
    """Per-channel scale/shift with running statistics kept per time step.

    gamma/beta are shared across the unrolled time steps; running_mean
    and running_var have shape (tau, channels) because activations at
    different steps have different distributions.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    initialized: np.ndarray  # (tau,) bool, True once a training batch updated step t
    epsilon: float = 1e-5
    momentum: float = 0.99

    @classmethod
    def create(cls, channels, tau, dtype=np.float64):
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros((tau, channels), dtype=dtype),
            running_var=np.ones((tau, channels), dtype=dtype),
            initialized=np.zeros(tau, dtype=bool),
        )


@dataclass
class LrnParams:
    depth_radius: int = 2
    k_bias: float = 2.0
    alpha: float = 1e-4
    beta_exp: float = 0.75


def check_finite(name, arr):
    # f64 accumulation cannot overflow on finite f32/f64 inputs, so a
    # non-finite sum means a non-finite element
    if not np.isfinite(arr.sum(dtype=np.float64)):
        raise FloatingPointError(f"non-finite values in {name}")


def conv2d(x, params):
    """SAME convolution, stride 1x1; output spatial extents equal input's."""
    if x.ndim != 4:
        raise ValueError(f"expected NHWC input, got ndim={x.ndim}")
    if x.shape[3] != params.kernel.shape[2]:
        raise ValueError(
            f"input has {x.shape[3]} channels, kernel expects {params.kernel.shape[2]}")
    out = backend.conv2d_fwd(x, params.kernel, params.bias)
    check_finite("conv2d output", out)
    return out


def conv2d_backward(x, params, grad_out):
    expected = x.shape[:3] + (params.kernel.shape[3],)
    if grad_out.shape != expected:
        raise ValueError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    gx, gk, gbias = backend.conv2d_bwd(x, params.kernel, grad_out)
    return gx, (gk, gbias)


def transposed_conv2d(x, params):
    """3x3 fractionally strided convolution doubling the spatial extents."""
    if params.kernel.shape[:2] != (3, 3):
        raise ValueError("transposed convolution requires a 3x3 kernel")
    if x.shape[3] != params.kernel.shape[2]:
        raise ValueError(
            f"input has {x.shape[3]} channels, kernel expects {params.kernel.shape[2]}")
    out = backend.tconv2d_fwd(x, params.kernel, params.bias)
    check_finite("transposed_conv2d output", out)
    return out


def transposed_conv2d_backward(x, params, grad_out):
    b, n, m, _ = x.shape
    expected = (b, 2 * n, 2 * m, params.kernel.shape[3])
    if grad_out.shape != expected:
        raise ValueError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    gx, gk, gbias = backend.tconv2d_bwd(x, params.kernel, grad_out)
    return gx, (gk, gbias)


def maxpool2x2(x):
    """2x2/stride-2 max pooling. Returns (halved output, winner mask)."""
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ValueError(f"spatial extents must be even, got {x.shape[1]}x{x.shape[2]}")
    return backend.maxpool2x2_fwd(x)


def maxpool2x2_backward(grad_out, mask):
    return backend.maxpool2x2_bwd(grad_out, mask)


def batchnorm(x, params, time_step, training):
    """Per-channel batch normalization with per-time-step running stats.

    Returns (out, cache); cache is None in inference mode.
    """
    if training:
        if x.shape[0] * x.shape[1] * x.shape[2] < 2:
            raise ValueError("training-mode batch norm needs at least 2 values per channel")
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        m = params.momentum
        params.running_mean[time_step] = m * params.running_mean[time_step] + (1 - m) * mean
        params.running_var[time_step] = m * params.running_var[time_step] + (1 - m) * var
        params.initialized[time_step] = True
        cache = (x, mean, var)
    else:
        if not params.initialized[time_step]:
            raise RuntimeError(
                f"inference-mode batch norm at step {time_step} before any training update")
        mean = params.running_mean[time_step]
        var = params.running_var[time_step]
        cache = None
    inv = 1.0 / np.sqrt(var + params.epsilon)
    scale = (params.gamma * inv).astype(x.dtype)
    shift = (params.beta - params.gamma * inv * mean).astype(x.dtype)
    out = x * scale + shift
    check_finite("batchnorm output", out)
    return out, cache


def batchnorm_backward(cache, params, grad_out):
    """Training-mode backward through the mini-batch statistics."""
    x, mean, var = cache
    m = x.shape[0] * x.shape[1] * x.shape[2]
    inv = 1.0 / np.sqrt(var + params.epsilon)
    xc = x - mean
    dxhat = grad_out * params.gamma.astype(x.dtype)
    dvar = (dxhat * xc).sum(axis=(0, 1, 2)) * (-0.5) * inv ** 3
    dmean = -(dxhat.sum(axis=(0, 1, 2))) * inv - 2.0 * dvar * xc.mean(axis=(0, 1, 2))
    gx = dxhat * inv + (2.0 / m) * dvar * xc + dmean / m
    xhat = xc * inv
    ggamma = (grad_out * xhat).sum(axis=(0, 1, 2))
    gbeta = grad_out.sum(axis=(0, 1, 2))
    return gx.astype(x.dtype), ggamma, gbeta


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return np.where(x > 0, grad_out, 0)


def lrn(x, params):
    """Divisive normalization across channels. Returns (out, denom cache)."""
    if params.depth_radius >= x.shape[3]:
        raise ValueError("depth_radius must be smaller than the channel count")
    out, denom = backend.lrn_fwd(x, params.depth_radius, params.k_bias, params.alpha,
                                 params.beta_exp)
    check_finite("lrn output", out)
    return out, denom


def lrn_backward(x, denom, grad_out, params):
    return backend.lrn_bwd(x, denom, grad_out, params.depth_radius, params.k_bias,
                           params.alpha, params.beta_exp)


def dense_softmax(x, weights, biases):
    """Affine map to class logits followed by a max-subtracted softmax.

    x: (batch, features); weights: (features, classes). Each output row
    is non-negative and sums to 1.
    """
    if x.shape[1] != weights.shape[0]:
        raise ValueError(f"feature count {x.shape[1]} != weight rows {weights.shape[0]}")
    logits = x @ weights + biases
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    check_finite("softmax output", probs)
    return probs


def dense_softmax_backward(x, weights, probs, grad_probs):
    """Backward through softmax and the affine map.

    Returns (grad_x, grad_weights, grad_biases).
    """
    inner = (grad_probs * probs).sum(axis=1, keepdims=True)
    glogits = probs * (grad_probs - inner)
    gw = x.T @ glogits
    gb = glogits.sum(axis=0)
    gx = glogits @ weights.T
    return gx, gw, gb
