"""Kernel backend selection.

Two implementations of the hot kernels exist: a compiled Cython
extension (occnet._kernels) and a numpy fallback (kernels_numpy). The
numpy convolution is one BLAS GEMM per kernel tap and beats the direct
compiled loops on BLAS-enabled builds, and numpy's vectorized pow wins
LRN, while the compiled max pooling avoids the fallback's temporaries;
`auto` therefore mixes the two (see `python -m occnet.bench` for the
measurements behind this).

Selection is controlled by OCCNET_BACKEND:
  auto      compiled maxpool when the extension imports, numpy otherwise
  python    numpy everywhere
  compiled  compiled conv/maxpool/LRN (raises if the extension is absent)

Transposed convolution and the dense/BN/ReLU layers are numpy in every
mode.
"""

import os

import numpy as np

from . import kernels_numpy as _knp

try:
    from . import _kernels as _kc
except ImportError:
    _kc = None

_MODE = os.environ.get("OCCNET_BACKEND", "auto").lower()
if _MODE not in ("auto", "python", "compiled"):
    raise ValueError(f"OCCNET_BACKEND must be auto|python|compiled, got {_MODE!r}")
if _MODE == "compiled" and _kc is None:
    raise ImportError("OCCNET_BACKEND=compiled but the occnet._kernels extension is not built")

_use_compiled_conv = _MODE == "compiled" and _kc is not None
_use_compiled_pool = _MODE in ("auto", "compiled") and _kc is not None
_use_compiled_lrn = _MODE == "compiled" and _kc is not None


def backend_info():
    return {
        "mode": _MODE,
        "extension_available": _kc is not None,
        "conv": "compiled" if _use_compiled_conv else "numpy",
        "maxpool": "compiled" if _use_compiled_pool else "numpy",
        "lrn": "compiled" if _use_compiled_lrn else "numpy",
    }


def _c(x):
    return np.ascontiguousarray(x)


def conv2d_fwd(x, kernel, bias):
    if _use_compiled_conv:
        return _kc.conv2d_fwd(_c(x), kernel, bias)
    return _knp.conv2d_fwd(x, kernel, bias)


def conv2d_bwd(x, kernel, grad_out):
    if _use_compiled_conv:
        return _kc.conv2d_bwd(_c(x), kernel, _c(grad_out))
    return _knp.conv2d_bwd(x, kernel, grad_out)


tconv2d_fwd = _knp.tconv2d_fwd
tconv2d_bwd = _knp.tconv2d_bwd


def maxpool2x2_fwd(x):
    if _use_compiled_pool:
        return _kc.maxpool2x2_fwd(_c(x))
    return _knp.maxpool2x2_fwd(x)


def maxpool2x2_bwd(grad_out, mask):
    if _use_compiled_pool:
        return _kc.maxpool2x2_bwd(_c(grad_out), _c(mask))
    return _knp.maxpool2x2_bwd(grad_out, mask)


def lrn_fwd(x, depth_radius, k_bias, alpha, beta):
    if _use_compiled_lrn:
        return _kc.lrn_fwd(_c(x), depth_radius, k_bias, alpha, beta)
    return _knp.lrn_fwd(x, depth_radius, k_bias, alpha, beta)


def lrn_bwd(x, denom, grad_out, depth_radius, k_bias, alpha, beta):
    if _use_compiled_lrn:
        return _kc.lrn_bwd(_c(x), _c(denom), _c(grad_out), depth_radius, k_bias, alpha, beta)
    return _knp.lrn_bwd(x, denom, grad_out, depth_radius, k_bias, alpha, beta)
