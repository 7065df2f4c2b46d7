"""Differentiable image operations on NCHW tensors.

Convolutions use the cross-correlation convention (no kernel flip). Bilinear
upsampling aligns corners. Max pooling routes gradient to the first maximal
element in row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, StateError
from .tensor import Tensor, make_result

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int):
    ekh = dilation * (kh - 1) + 1
    ekw = dilation * (kw - 1) + 1
    v = sliding_window_view(xp, (ekh, ekw), axis=(2, 3))
    return v[:, :, ::stride, ::stride, ::dilation, ::dilation][:, :, :ho, :wo]


def _conv_forward(xp, w, stride, dilation, ho, wo):
    v = _windows(xp, w.shape[2], w.shape[3], stride, dilation, ho, wo)
    out = np.tensordot(v, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(g, w, padded_shape, stride, dilation):
    """Scatter output gradients back through the kernel taps (col2im)."""
    dxp = np.zeros(padded_shape, dtype=np.result_type(g, w))
    ho, wo = g.shape[2], g.shape[3]
    for i in range(w.shape[2]):
        r0 = i * dilation
        for j in range(w.shape[3]):
            c0 = j * dilation
            contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0]))
            dxp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride,
                c0 : c0 + stride * (wo - 1) + 1 : stride] += contrib.transpose(0, 3, 1, 2)
    return dxp


def _conv_weight_grad(g, xp, kh, kw, stride, dilation):
    v = _windows(xp, kh, kw, stride, dilation, g.shape[2], g.shape[3])
    return np.tensordot(g, v, axes=([0, 2, 3], [0, 2, 3]))


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-d cross-correlation. ``kernel`` is (out_channels, in_channels, kh, kw)."""
    if stride < 1 or dilation < 1:
        raise ShapeError("stride and dilation must be >= 1")
    n, c, h, w_ = x.shape
    o, ck, kh, kw = kernel.shape
    if c != ck:
        raise ShapeError(f"input has {c} channels, kernel expects {ck}")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w_, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} (dilation {dilation}) larger than padded input {h}x{w_}")
    xp = _pad(x.data, padding)
    out = _conv_forward(xp, kernel.data, stride, dilation, ho, wo)
    inputs = (x, kernel)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
        inputs = (x, kernel, bias)

    def bw(g):
        gx = gk = gb = None
        if x.requires_grad:
            dxp = _conv_input_grad(g, kernel.data, xp.shape, stride, dilation)
            gx = dxp[:, :, padding : padding + h, padding : padding + w_] if padding else dxp
        if kernel.requires_grad:
            gk = _conv_weight_grad(g, xp, kh, kw, stride, dilation)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk, gb)

    return make_result(out, inputs, bw)


def transposed_conv2d(
    x: Tensor, kernel: Tensor, stride: int = 1, bias: Optional[Tensor] = None
) -> Tensor:
    """Adjoint of :func:`conv2d` with zero padding and unit dilation.

    ``kernel`` is (in_channels, out_channels, kh, kw); the output is
    ``(H - 1) * stride + kh`` high.
    """
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    n, c, h, w_ = x.shape
    ci, co, kh, kw = kernel.shape
    if c != ci:
        raise ShapeError(f"input has {c} channels, kernel expects {ci}")
    out_shape = (n, co, (h - 1) * stride + kh, (w_ - 1) * stride + kw)
    out = _conv_input_grad(x.data, kernel.data, out_shape, stride, 1)
    inputs = (x, kernel)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
        inputs = (x, kernel, bias)

    def bw(g):
        gx = gk = gb = None
        if x.requires_grad:
            gx = _conv_forward(g, kernel.data, stride, 1, h, w_)
        if kernel.requires_grad:
            gk = _conv_weight_grad(x.data, g, kh, kw, stride, 1)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk, gb)

    return make_result(out, inputs, bw)


# pooling -------------------------------------------------------------------


def max_pool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    stride = stride or window
    n, c, h, w_ = x.shape
    if window > h or window > w_:
        raise ShapeError(f"pool window {window} exceeds input {h}x{w_}")
    ho = (h - window) // stride + 1
    wo = (w_ - window) // stride + 1
    v = _windows(x.data, window, window, stride, 1, ho, wo).reshape(n, c, ho, wo, -1)
    arg = np.argmax(v, axis=-1)
    out = np.take_along_axis(v, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        for t in range(window * window):
            i, j = divmod(t, window)
            sel = np.where(arg == t, g, 0.0)
            gx[:, :, i : i + stride * (ho - 1) + 1 : stride,
               j : j + stride * (wo - 1) + 1 : stride] += sel
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), bw)


def _bin_matrix(size: int, bins: int, dtype) -> np.ndarray:
    """Row b averages the b-th of ``bins`` contiguous, near-equal slices of ``size``."""
    m = np.zeros((bins, size), dtype=dtype)
    for b in range(bins):
        lo = (b * size) // bins
        hi = ((b + 1) * size) // bins
        m[b, lo:hi] = 1.0 / (hi - lo)
    return m


def _separable(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply ``rows @ X @ cols.T`` to every (n, c) plane."""
    out = rows @ x.data @ cols.T
    return make_result(out, (x,), lambda g: (rows.T @ g @ cols,))


def adaptive_avg_pool2d(x: Tensor, bins: int) -> Tensor:
    h, w_ = x.shape[2], x.shape[3]
    if bins < 1 or bins > h or bins > w_:
        raise ShapeError(f"{bins} bins invalid for a {h}x{w_} map")
    return _separable(x, _bin_matrix(h, bins, x.dtype), _bin_matrix(w_, bins, x.dtype))


def pool2d(x: Tensor, kind: str, window: Optional[int] = None, bins: Optional[int] = None,
           stride: Optional[int] = None) -> Tensor:
    if kind == "max":
        return max_pool2d(x, window, stride)
    if kind == "adaptive_avg":
        return adaptive_avg_pool2d(x, bins)
    raise ValueError(f"unknown pool kind {kind!r}")


def _bilinear_matrix(target: int, source: int, dtype) -> np.ndarray:
    m = np.zeros((target, source), dtype=np.float64)
    for i in range(target):
        pos = i * (source - 1) / (target - 1) if target > 1 else 0.0
        lo = min(int(np.floor(pos)), source - 1)
        hi = min(lo + 1, source - 1)
        frac = pos - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Bilinear resize with corner alignment."""
    if target_h < 1 or target_w < 1:
        raise ShapeError("upsample targets must be >= 1")
    h, w_ = x.shape[2], x.shape[3]
    if (h, w_) == (target_h, target_w):
        return x
    return _separable(
        x, _bilinear_matrix(target_h, h, x.dtype), _bilinear_matrix(target_w, w_, x.dtype)
    )


# normalisation -------------------------------------------------------------


@dataclass
class RunningStats:
    """Per-channel running mean/variance for batch norm; ``None`` until first update."""

    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None
    momentum: float = BN_MOMENTUM

    @classmethod
    def initialized(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    @property
    def ready(self) -> bool:
        return self.mean is not None and self.var is not None

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray, count: int) -> None:
        unbiased = batch_var * (count / (count - 1)) if count > 1 else batch_var
        if not self.ready:
            self.mean = batch_mean.copy()
            self.var = unbiased.copy()
            return
        m = self.momentum
        self.mean = (m * self.mean + (1 - m) * batch_mean).astype(self.mean.dtype)
        self.var = (m * self.var + (1 - m) * unbiased).astype(self.var.dtype)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str = "train",
    running_stats: Optional[RunningStats] = None,
    epsilon: float = BN_EPSILON,
) -> Tensor:
    """Per-channel normalisation over batch and spatial axes."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have length {c}")
    shape = (1, c, 1, 1)
    xd = x.data
    if mode == "train":
        axes = (0, 2, 3)
        count = xd.size // c
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running_stats is not None:
            running_stats.update(mu, var, count)
    elif mode == "infer":
        if running_stats is None or not running_stats.ready:
            raise StateError("batch_norm in infer mode needs initialised running stats")
        mu, var = running_stats.mean, running_stats.var
        count = None
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv = (1.0 / np.sqrt(var + epsilon)).astype(xd.dtype)
    xhat = (xd - mu.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if count is None:
                gx = dxhat * inv.reshape(shape)
            else:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = inv.reshape(shape) / count * (count * dxhat - s1 - xhat * s2)
        return (gx, gg, gb)

    return make_result(out, (x, gamma, beta), bw)


# activations -----------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return make_result(p, (x,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "softmax_over_classes":
        return softmax(x, axis=1)
    raise ValueError(f"unknown activation {kind!r}")


# structural ------------------------------------------------------------------


def concat_channels(*tensors: Tensor) -> Tensor:
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"cannot concat {t.shape} with {ref}")
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=1)

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return make_result(out, tuple(tensors), bw)


def split_channels(x: Tensor, parts: int) -> list[Tensor]:
    c = x.shape[1]
    if c % parts:
        raise ShapeError(f"{c} channels not divisible into {parts} parts")
    step = c // parts
    return [x[:, i * step : (i + 1) * step] for i in range(parts)]


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0:
        return x
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out_features, in_features)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input features {x.shape[-1]} != weight {weight.shape[1]}")
    out = x.data @ weight.data.T
    inputs: Sequence[Tensor] = (x, weight)
    if bias is not None:
        out = out + bias.data
        inputs = (x, weight, bias)

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb)

    return make_result(out, tuple(inputs), bw)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)
