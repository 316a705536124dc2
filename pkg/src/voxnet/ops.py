"""Forward and backward numerical kernels on dense float tensors.

A tensor is a C-contiguous ``numpy.ndarray`` of float32 (float64 is accepted
everywhere so gradient checks can run in double precision). Volumetric
tensors follow the ``[batch, channel, depth, height, width]`` layout.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1
PROB_FLOOR = 1e-12


def _triple(v):
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ConfigError(f"expected 3 extents, got {v!r}")
    return t


def as_tensor(x, dtype=np.float32):
    """Return ``x`` as a contiguous float array (float64 input keeps its precision)."""
    arr = np.asarray(x)
    if arr.dtype != np.float64:
        arr = arr.astype(dtype, copy=False)
    if arr.ndim == 0 or arr.ndim > 5:
        raise ShapeError(f"tensor order must be in 1..5, got {arr.ndim}")
    if 0 in arr.shape:
        raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
    return np.ascontiguousarray(arr)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be >= 1")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ConfigError(
                f"invalid conv geometry kernel={self.kernel} stride={self.stride} padding={self.padding}"
            )

    def output_extents(self, extents):
        """Spatial output extents for input extents ``(D, H, W)``."""
        out = []
        for axis, (n, k, s, p) in enumerate(zip(extents, self.kernel, self.stride, self.padding)):
            m = (n + 2 * p - k) // s + 1
            if n + 2 * p - k < 0 or m < 1:
                raise ConfigError(
                    f"conv output extent on spatial axis {axis} is non-positive "
                    f"(in={n}, kernel={k}, stride={s}, pad={p})"
                )
            out.append(m)
        return tuple(out)


def _check_conv(x, weights, bias, spec):
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be 5-D [b,c,D,H,W], got shape {x.shape}", axis=0)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv3d channel axis: input has {x.shape[1]} channels, spec expects {spec.in_channels}",
            axis=1,
        )
    expected = (spec.out_channels, spec.in_channels) + spec.kernel
    if weights.shape != expected:
        raise ShapeError(f"conv3d weights shape {weights.shape} != {expected}", axis=1)
    if bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv3d bias shape {bias.shape} != ({spec.out_channels},)", axis=1)
    return spec.output_extents(x.shape[2:])


def _weight_rows(weights):
    # (co, ci, kd, kh, kw) -> (co, kd*kh*kw*ci), matching the channels-last im2col rows
    return np.ascontiguousarray(weights.transpose(0, 2, 3, 4, 1)).reshape(weights.shape[0], -1)


def conv3d(x, weights, bias, spec):
    """Direct 3-D cross-correlation with zero padding, via im2col + GEMM."""
    od, oh, ow = _check_conv(x, weights, bias, spec)
    b = x.shape[0]
    wrows = _weight_rows(weights)
    geom = (*spec.kernel, *spec.stride, *spec.padding, od, oh, ow)
    out = np.empty((b, spec.out_channels, od * oh * ow), dtype=x.dtype)
    for n in range(b):
        cols = kernels.im2col3d(np.ascontiguousarray(x[n].transpose(1, 2, 3, 0)), *geom)
        out[n] = (cols @ wrows.T).T
    out += bias.reshape(1, -1, 1)
    return out.reshape(b, spec.out_channels, od, oh, ow)


def conv3d_backward(x, weights, grad_out, spec):
    """Gradients of :func:`conv3d` w.r.t. input, weights and bias."""
    b, ci, D, H, W = x.shape
    od, oh, ow = grad_out.shape[2:]
    wrows = _weight_rows(weights)
    g = grad_out.reshape(b, spec.out_channels, -1)
    geom = (*spec.kernel, *spec.stride, *spec.padding, od, oh, ow)
    dw_t = np.zeros(wrows.shape[::-1], dtype=x.dtype)
    dx = np.empty_like(x)
    for n in range(b):
        cols = kernels.im2col3d(np.ascontiguousarray(x[n].transpose(1, 2, 3, 0)), *geom)
        gt = np.ascontiguousarray(g[n].T)
        dw_t += cols.T @ gt
        dcols = gt @ wrows
        dx[n] = kernels.col2im3d(dcols, D, H, W, ci, *geom).transpose(3, 0, 1, 2)
    co = spec.out_channels
    dw = dw_t.T.reshape(co, *spec.kernel, ci).transpose(0, 4, 1, 2, 3)
    db = g.sum(axis=(0, 2), dtype=np.float64).astype(x.dtype)
    return dx, np.ascontiguousarray(dw), db


def maxpool3d(x, window, stride=None):
    """Max pooling over truncated (unpadded) windows.

    Returns ``(out, argmax)`` where ``argmax`` holds the flat index into ``x``
    of each window maximum (lowest index wins ties).
    """
    window = _triple(window)
    stride = window if stride is None else _triple(stride)
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d input must be 5-D, got shape {x.shape}", axis=0)
    if min(window) < 1 or min(stride) < 1:
        raise ConfigError(f"invalid pooling window={window} stride={stride}")
    ext = []
    for axis, (n, w, s) in enumerate(zip(x.shape[2:], window, stride)):
        if w > n:
            raise ConfigError(f"pooling window {w} exceeds input extent {n} on spatial axis {axis}")
        ext.append((n - w) // s + 1)
    x = np.ascontiguousarray(x)
    return kernels.maxpool3d_forward(x, *window, *stride, *ext)


def maxpool3d_backward(grad_out, argmax, input_shape):
    g = np.ascontiguousarray(grad_out).ravel()
    dx = kernels.maxpool3d_backward(g, argmax.ravel(), int(np.prod(input_shape)))
    return dx.reshape(input_shape)


def _bn_axes(x):
    return (0,) + tuple(range(2, x.ndim))


def batchnorm(x, gamma, beta, running_mean, running_var, mode="train",
              momentum=BN_MOMENTUM, epsilon=BN_EPSILON):
    """Per-channel batch normalization over all non-channel axes.

    In train mode the batch statistics (accumulated in float64) normalize the
    input and ``running_mean``/``running_var`` are updated in place by an
    exponential moving average with weight ``momentum`` on the new batch.
    Returns ``(out, cache)``; ``cache`` is None in infer mode.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm channel axis: input has {c} channels, gamma/beta have {gamma.shape}/{beta.shape}",
            axis=1,
        )
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if mode == "train":
        axes = _bn_axes(x)
        mean = x.mean(axis=axes, dtype=np.float64)
        centered = x - mean.astype(x.dtype).reshape(bshape)
        var = np.square(centered).mean(axis=axes, dtype=np.float64)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)
    elif mode == "infer":
        var = running_var.astype(np.float64)
        centered = x - running_mean.astype(x.dtype).reshape(bshape)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(x.dtype)
    xhat = centered * inv_std.reshape(bshape)
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    cache = (xhat, inv_std) if mode == "train" else None
    return out, cache


def batchnorm_backward(grad_out, gamma, cache):
    """Chain rule through train-mode batchnorm (batch statistics included)."""
    xhat, inv_std = cache
    c = xhat.shape[1]
    bshape = (1, c) + (1,) * (xhat.ndim - 2)
    axes = _bn_axes(xhat)
    m = xhat.size // c
    dt = grad_out.dtype
    dbeta = grad_out.sum(axis=axes, dtype=np.float64).astype(dt)
    dgamma = (grad_out * xhat).sum(axis=axes, dtype=np.float64).astype(dt)
    scale = (gamma.astype(np.float64) * inv_std / m).astype(dt)
    dx = scale.reshape(bshape) * (
        m * grad_out - dbeta.reshape(bshape) - xhat * dgamma.reshape(bshape)
    )
    return dx, dgamma, dbeta


def dense(x, weights, bias):
    """Fully connected layer: ``x @ weights.T + bias``."""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"dense inner dimension mismatch: input {x.shape} vs weights {weights.shape}", axis=1
        )
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense bias shape {bias.shape} != ({weights.shape[0]},)", axis=0)
    return x @ weights.T + bias


def dense_backward(x, weights, grad_out):
    return grad_out @ weights, grad_out.T @ x, grad_out.sum(axis=0, dtype=np.float64).astype(x.dtype)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype)


def dropout(x, p, mode, rng):
    """Inverted dropout. Returns ``(out, mask)``; the mask already carries the 1/(1-p) scale."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "infer" or p == 0.0:
        return x, None
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
    return x * mask, mask


def softmax(logits):
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"softmax expects [b, k>=2] logits, got {logits.shape}", axis=1)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs, labels):
    """Mean negative log-likelihood of ``labels`` under row-stochastic ``probs``."""
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeError(f"probs {probs.shape} and labels {labels.shape} disagree", axis=0)
    k = probs.shape[1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k}), got {labels.tolist()}")
    sums = probs.sum(axis=1, dtype=np.float64)
    if np.any(np.abs(sums - 1.0) > 1e-4):
        raise ValueError("probability rows must sum to 1")
    picked = probs[np.arange(len(labels)), labels].astype(np.float64)
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))
