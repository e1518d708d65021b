"""The six architectures: presets, initialization, unrolled forward, BPTT.

Two hidden convolutional layers with optional lateral (same layer,
previous step) and top-down (layer 2 -> layer 1, previous step)
recurrent connections, unrolled for tau steps on a constant input.
The hidden state of a layer is its pre-pool activation; pooling sits on
the bottom-up path into the next layer and before the dense readout.
"""

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .layers import (
    BatchNormParams,
    ConvParams,
    LrnParams,
    batchnorm,
    batchnorm_backward,
    conv2d,
    conv2d_backward,
    dense_softmax,
    dense_softmax_backward,
    lrn,
    lrn_backward,
    maxpool2x2,
    maxpool2x2_backward,
    relu,
    relu_backward,
    transposed_conv2d,
    transposed_conv2d_backward,
)

CHECKPOINT_MAGIC = b"OCNET001"


@dataclass
class ModelSpec:
    has_lateral: bool
    has_topdown: bool
    filters: int = 32
    kernel_size: int = 3
    tau: int = 4
    classes: int = 10
    input_channels: int = 2
    input_size: int = 32

    def __post_init__(self):
        if self.input_size % 4:
            raise ValueError("input_size must be divisible by 4 (two 2x2 pools)")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @property
    def dense_features(self):
        s = self.input_size // 4
        return s * s * self.filters


# connection flags / filter count / kernel size per named architecture
_PRESETS = {
    "B": dict(has_lateral=False, has_topdown=False, filters=32, kernel_size=3),
    "B-F": dict(has_lateral=False, has_topdown=False, filters=64, kernel_size=3),
    "B-K": dict(has_lateral=False, has_topdown=False, filters=32, kernel_size=5),
    "BT": dict(has_lateral=False, has_topdown=True, filters=32, kernel_size=3),
    "BL": dict(has_lateral=True, has_topdown=False, filters=32, kernel_size=3),
    "BLT": dict(has_lateral=True, has_topdown=True, filters=32, kernel_size=3),
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name, input_channels=2, classes=10, tau=4, input_size=32, filters=None):
    """Build the ModelSpec for one of the six named architectures."""
    if name not in _PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
    kw = dict(_PRESETS[name])
    if filters is not None:
        kw["filters"] = filters * 2 if name == "B-F" else filters
    return ModelSpec(input_channels=input_channels, classes=classes, tau=tau,
                     input_size=input_size, **kw)


@dataclass
class NetworkParams:
    conv_b1: ConvParams
    conv_b2: ConvParams
    conv_l1: ConvParams | None
    conv_l2: ConvParams | None
    conv_t1: ConvParams | None
    bn1: BatchNormParams
    bn2: BatchNormParams
    dense_w: np.ndarray
    dense_b: np.ndarray
    lrn: LrnParams = field(default_factory=LrnParams)


def trainable_items(spec, params):
    """Named trainable tensors, in declaration order.

    Lateral and top-down connections are bias-free; the shared additive
    degree of freedom lives in the bottom-up biases.
    """
    items = [("conv_b1.kernel", params.conv_b1.kernel), ("conv_b1.bias", params.conv_b1.bias)]
    if spec.has_lateral:
        items.append(("conv_l1.kernel", params.conv_l1.kernel))
    if spec.has_topdown:
        items.append(("conv_t1.kernel", params.conv_t1.kernel))
    items += [("conv_b2.kernel", params.conv_b2.kernel), ("conv_b2.bias", params.conv_b2.bias)]
    if spec.has_lateral:
        items.append(("conv_l2.kernel", params.conv_l2.kernel))
    items += [
        ("bn1.gamma", params.bn1.gamma), ("bn1.beta", params.bn1.beta),
        ("bn2.gamma", params.bn2.gamma), ("bn2.beta", params.bn2.beta),
        ("dense_w", params.dense_w), ("dense_b", params.dense_b),
    ]
    return items


def count_params(spec):
    """Exact trainable-parameter count for a preset."""
    k, f, c = spec.kernel_size, spec.filters, spec.input_channels
    n = k * k * c * f + f          # bottom-up 1
    n += k * k * f * f + f         # bottom-up 2
    if spec.has_lateral:
        n += 2 * 3 * 3 * f * f
    if spec.has_topdown:
        n += 3 * 3 * f * f
    n += 4 * f                     # gamma/beta, both layers
    n += spec.dense_features * spec.classes + spec.classes
    return n


def _truncated_normal(rng, shape, sigma):
    """mu=0 normal truncated at +-2 sigma, resampling on exceedance."""
    out = rng.normal(0.0, sigma, size=shape)
    bad = np.abs(out) > 2 * sigma
    while bad.any():
        out[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(out) > 2 * sigma
    return out


def init_params(spec, rng_seed, dtype=np.float64):
    """Seeded initialization.

    Bottom-up kernels: truncated normal, sigma = 2 / kernel_size.
    Lateral, top-down and dense weights: truncated normal, sigma = 0.1.
    Biases and beta start at zero, gamma at one.
    """
    rng = np.random.default_rng(rng_seed)
    k, f, c = spec.kernel_size, spec.filters, spec.input_channels
    sig_b = 2.0 / k

    def tn(shape, sigma):
        return _truncated_normal(rng, shape, sigma).astype(dtype)

    def zero_bias(n):
        return np.zeros(n, dtype=dtype)

    conv_b1 = ConvParams(tn((k, k, c, f), sig_b), zero_bias(f))
    conv_b2 = ConvParams(tn((k, k, f, f), sig_b), zero_bias(f))
    conv_l1 = ConvParams(tn((3, 3, f, f), 0.1), zero_bias(f)) if spec.has_lateral else None
    conv_l2 = ConvParams(tn((3, 3, f, f), 0.1), zero_bias(f)) if spec.has_lateral else None
    conv_t1 = ConvParams(tn((3, 3, f, f), 0.1), zero_bias(f)) if spec.has_topdown else None
    dense_w = tn((spec.dense_features, spec.classes), 0.1)
    dense_b = zero_bias(spec.classes)
    return NetworkParams(
        conv_b1=conv_b1, conv_b2=conv_b2, conv_l1=conv_l1, conv_l2=conv_l2,
        conv_t1=conv_t1,
        bn1=BatchNormParams.create(f, spec.tau, dtype=dtype),
        bn2=BatchNormParams.create(f, spec.tau, dtype=dtype),
        dense_w=dense_w, dense_b=dense_b,
    )


@dataclass
class UnrollTrace:
    """Per-step activations of one unrolled forward pass.

    preact[t][l] is z (summed pre-activation), hidden[t][l] the post-LRN
    state h; indices l in {0, 1} for the two hidden layers. The
    remaining fields cache what BPTT needs.
    """

    preact: list
    hidden: list
    softmax_out: list
    bn_stats: list      # per t, per l: (mean, var)
    lrn_denom: list     # per t, per l: denominator tensor
    pool_mask: list     # per t, per l: argmax masks
    pooled: list        # per t: (pooled h1, flattened pooled h2)
    training: bool


def _hidden_block(z, bn_params, lrn_params, t, training):
    out, bn_cache = batchnorm(z, bn_params, t, training)
    r = relu(out)
    h, denom = lrn(r, lrn_params)
    return h, denom, bn_cache


def forward_unrolled(spec, params, x, training):
    """Run the tau-step unrolled forward pass on a constant input.

    x: (batch, input_size, input_size, input_channels). Recurrent inputs
    are zero at t=0.
    """
    expect = (x.shape[0], spec.input_size, spec.input_size, spec.input_channels)
    if x.shape != expect:
        raise ValueError(f"input shape {x.shape}, expected {expect}")
    trace = UnrollTrace([], [], [], [], [], [], [], training)
    h1_prev = h2_prev = None
    for t in range(spec.tau):
        z1 = conv2d(x, params.conv_b1)
        if spec.has_lateral and t > 0:
            z1 += conv2d(h1_prev, params.conv_l1)
        if spec.has_topdown and t > 0:
            z1 += transposed_conv2d(h2_prev, params.conv_t1)
        h1, denom1, bn1_cache = _hidden_block(z1, params.bn1, params.lrn, t, training)
        pooled1, mask1 = maxpool2x2(h1)
        z2 = conv2d(pooled1, params.conv_b2)
        if spec.has_lateral and t > 0:
            z2 += conv2d(h2_prev, params.conv_l2)
        h2, denom2, bn2_cache = _hidden_block(z2, params.bn2, params.lrn, t, training)
        pooled2, mask2 = maxpool2x2(h2)
        flat2 = pooled2.reshape(x.shape[0], -1)
        probs = dense_softmax(flat2, params.dense_w, params.dense_b)

        trace.preact.append([z1, z2])
        trace.hidden.append([h1, h2])
        trace.softmax_out.append(probs)
        trace.bn_stats.append([bn1_cache[1:] if training else None,
                               bn2_cache[1:] if training else None])
        trace.lrn_denom.append([denom1, denom2])
        trace.pool_mask.append([mask1, mask2])
        trace.pooled.append((pooled1, flat2))
        h1_prev, h2_prev = h1, h2
    return trace


def _hidden_block_backward(grad_h, z, bn_params, lrn_params, stats, denom, t):
    """Backward through LRN -> ReLU -> BN; recomputes the cheap
    elementwise intermediates instead of caching them."""
    mean, var = stats
    bn_out, _ = batchnorm_with_stats(z, bn_params, mean, var)
    r = relu(bn_out)
    grad_r = lrn_backward(r, denom, grad_h, lrn_params)
    grad_bn = relu_backward(grad_r, bn_out)
    return batchnorm_backward((z, mean, var), bn_params, grad_bn)


def batchnorm_with_stats(x, params, mean, var):
    inv = 1.0 / np.sqrt(var + params.epsilon)
    scale = (params.gamma * inv).astype(x.dtype)
    shift = (params.beta - params.gamma * inv * mean).astype(x.dtype)
    return x * scale + shift, None


def backward_bptt(spec, params, x, trace, grad_softmax):
    """Gradients of the time-summed loss w.r.t. every trainable tensor.

    grad_softmax: per-step gradients of the loss w.r.t. softmax_out[t].
    Weights are shared across time, so each parameter accumulates over
    all steps at which it is used. Returns {name: gradient} matching
    trainable_items.
    """
    if not trace.training:
        raise ValueError("backward_bptt needs a trace recorded in training mode")
    if len(grad_softmax) != spec.tau:
        raise ValueError(f"expected {spec.tau} per-step loss gradients, got {len(grad_softmax)}")
    grads = {name: np.zeros_like(arr) for name, arr in trainable_items(spec, params)}
    carry_h1 = carry_h2 = None
    for t in reversed(range(spec.tau)):
        z1, z2 = trace.preact[t]
        h1_prev = trace.hidden[t - 1][0] if t > 0 else None
        h2_prev = trace.hidden[t - 1][1] if t > 0 else None
        pooled1, flat2 = trace.pooled[t]
        mask1, mask2 = trace.pool_mask[t]

        gflat, gw, gb = dense_softmax_backward(flat2, params.dense_w,
                                               trace.softmax_out[t], grad_softmax[t])
        grads["dense_w"] += gw
        grads["dense_b"] += gb
        s = spec.input_size // 4
        grad_h2 = maxpool2x2_backward(gflat.reshape(-1, s, s, spec.filters), mask2)
        if carry_h2 is not None:
            grad_h2 += carry_h2
        grad_z2, ggamma2, gbeta2 = _hidden_block_backward(
            grad_h2, z2, params.bn2, params.lrn, trace.bn_stats[t][1],
            trace.lrn_denom[t][1], t)
        grads["bn2.gamma"] += ggamma2
        grads["bn2.beta"] += gbeta2

        carry_h2 = None
        grad_pooled1, (gk, gbias) = conv2d_backward(pooled1, params.conv_b2, grad_z2)
        grads["conv_b2.kernel"] += gk
        grads["conv_b2.bias"] += gbias
        if spec.has_lateral and t > 0:
            gx, (gk, _) = conv2d_backward(h2_prev, params.conv_l2, grad_z2)
            grads["conv_l2.kernel"] += gk
            carry_h2 = gx

        grad_h1 = maxpool2x2_backward(grad_pooled1, mask1)
        if carry_h1 is not None:
            grad_h1 += carry_h1
        grad_z1, ggamma1, gbeta1 = _hidden_block_backward(
            grad_h1, z1, params.bn1, params.lrn, trace.bn_stats[t][0],
            trace.lrn_denom[t][0], t)
        grads["bn1.gamma"] += ggamma1
        grads["bn1.beta"] += gbeta1

        carry_h1 = None
        _, (gk, gbias) = conv2d_backward(x, params.conv_b1, grad_z1)
        grads["conv_b1.kernel"] += gk
        grads["conv_b1.bias"] += gbias
        if spec.has_lateral and t > 0:
            gx, (gk, _) = conv2d_backward(h1_prev, params.conv_l1, grad_z1)
            grads["conv_l1.kernel"] += gk
            carry_h1 = gx
        if spec.has_topdown and t > 0:
            gx, (gk, _) = transposed_conv2d_backward(h2_prev, params.conv_t1, grad_z1)
            grads["conv_t1.kernel"] += gk
            carry_h2 = gx if carry_h2 is None else carry_h2 + gx
    return grads


# --- checkpoint container -------------------------------------------------
#
# layout: magic, u32 header length, JSON header (spec + tensor manifest),
# then raw little-endian float32 blobs in manifest order.

def _state_items(spec, params):
    items = trainable_items(spec, params)
    for ln, bn in (("bn1", params.bn1), ("bn2", params.bn2)):
        items += [
            (f"{ln}.running_mean", bn.running_mean),
            (f"{ln}.running_var", bn.running_var),
            (f"{ln}.initialized", bn.initialized.astype(np.float32)),
        ]
    return items


def save_checkpoint(path, spec, params, preset_name="", extra=None):
    """Write the versioned binary parameter container.

    extra: optional {name: array} appended to the manifest (e.g.
    optimizer state for resumable training).
    """
    items = _state_items(spec, params)
    if extra:
        items += [(f"extra.{k}", np.asarray(v)) for k, v in sorted(extra.items())]
    header = {
        "format_version": 1,
        "preset": preset_name,
        "spec": asdict(spec),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in items],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in items:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Read a checkpoint. Returns (spec, params, preset_name, extra)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        spec = ModelSpec(**header["spec"])
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * n)
            if len(raw) != 4 * n:
                raise ValueError(f"{path}: truncated blob for {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(dtype)
    params = init_params(spec, rng_seed=0, dtype=dtype)
    extra = {}
    for name, arr in tensors.items():
        if name.startswith("extra."):
            extra[name[len("extra."):]] = arr
            continue
        _assign(params, name, arr)
    return spec, params, header.get("preset", ""), extra


def _assign(params, name, arr):
    if name.endswith(".initialized"):
        bn = getattr(params, name.split(".")[0])
        bn.initialized = arr.astype(bool)
        return
    obj = params
    parts = name.split(".")
    for p in parts[:-1]:
        obj = getattr(obj, p)
    if getattr(obj, parts[-1]).shape != arr.shape:
        raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, "
                         f"expected {getattr(obj, parts[-1]).shape}")
    setattr(obj, parts[-1], arr)
