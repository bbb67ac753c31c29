"""Differentiable layer primitives built on the autodiff core.

All convolutions are cross-correlations (no kernel flip) with zero
padding, implemented as im2col + batched matmul.  Max reductions break
ties toward the first index in row-major order so results (and gradient
routing) are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .autodiff import Tensor, apply_op, as_tensor
from .errors import ConfigError, StateError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # fraction of the old running statistic kept per update
EPS_NORM = 1e-12
EPS_LOG = 1e-12


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, *self.kernel) < 1:
            raise ConfigError(f"conv spec extents must be positive: {self}")
        if self.stride < 1 or self.padding < 0 or self.dilation < 1:
            raise ConfigError(f"invalid stride/padding/dilation: {self}")

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        oh = (h + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
        ow = (w + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ConfigError(
                f"convolution output would be {oh}x{ow} for input {h}x{w} with {self}"
            )
        return oh, ow


def conv2d(x, weight, bias, spec: ConvSpec) -> Tensor:
    """Cross-correlate x[N,C,H,W] with weight[C',C,kh,kw] plus bias[C']."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    if x.ndim != 4:
        raise ConfigError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    kh, kw = spec.kernel
    if c != spec.in_channels or weight.shape != (spec.out_channels, c, kh, kw):
        raise ConfigError(
            f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}, spec {spec}"
        )
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ConfigError(f"conv2d bias shape {bias.shape} != ({spec.out_channels},)")
    oh, ow = spec.out_size(h, w)
    s, p, d = spec.stride, spec.padding, spec.dilation
    co = spec.out_channels
    wmat = weight.data.reshape(co, c * kh * kw)

    if (kh, kw, s, p) == (1, 1, 1, 0):
        # pointwise fast path: channels mix under a plain matmul
        cols = x.data.reshape(n, c, h * w)
        out = np.matmul(wmat, cols).reshape(n, co, oh, ow)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def vjp(g):
            g2 = g.reshape(n, co, oh * ow)
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0) \
                .reshape(weight.shape) if weight.requires_grad else None
            gx = np.matmul(wmat.T, g2).reshape(x.shape) if x.requires_grad else None
            return (gx, gw, gb) if bias is not None else (gx, gw)

        inputs = (x, weight, bias) if bias is not None else (x, weight)
        return apply_op("conv2d", out, inputs, vjp)

    # im2col with the batch folded into the gemm columns
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    sn, sc, sh, sw = xp.strides
    view = as_strided(xp, (c, kh, kw, n, oh, ow),
                      (sc, d * sh, d * sw, sn, s * sh, s * sw))
    cols = np.ascontiguousarray(view).reshape(c * kh * kw, n * oh * ow)
    out = np.ascontiguousarray(
        (wmat @ cols).reshape(co, n, oh, ow).transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, n * oh * ow)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gview = (wmat.T @ g2).reshape(c, kh, kw, n, oh, ow)
            gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i * d:i * d + s * (oh - 1) + 1:s,
                        j * d:j * d + s * (ow - 1) + 1:s] += \
                        gview[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return apply_op("conv2d", out, inputs, vjp)


class BNState:
    """Running statistics for one batch-norm layer.

    The initialized flag is kept as a 1-element array so it rides through
    checkpoints with the other buffers.
    """

    def __init__(self, channels: int, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self._init_flag = np.zeros(1, dtype=dtype)

    @property
    def initialized(self) -> bool:
        return bool(self._init_flag[0])

    @initialized.setter
    def initialized(self, value: bool) -> None:
        self._init_flag[0] = 1.0 if value else 0.0


def batch_norm2d(x, gamma, beta, state: BNState, training: bool,
                 momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Channelwise batch normalization with an affine transform.

    Training mode normalizes with (biased) batch statistics and updates the
    running statistics by exponential moving average; eval mode uses the
    running statistics and requires at least one prior training step.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ConfigError(
            f"batch_norm2d shapes: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    axes = (0, 2, 3)
    if training:
        m = x.data.mean(axis=axes)
        v = x.data.var(axis=axes)
        state.mean *= momentum
        state.mean += (1.0 - momentum) * m
        state.var *= momentum
        state.var += (1.0 - momentum) * v
        state.initialized = True
    else:
        if not state.initialized:
            raise StateError("batch norm evaluated before any training step")
        m, v = state.mean, state.var

    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - m[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    count = x.shape[0] * x.shape[2] * x.shape[3]

    def vjp(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            # batch statistics depend on x, so the mean/variance terms feed back
            t1 = gxhat.sum(axis=axes, keepdims=True) / count
            t2 = (gxhat * xhat).sum(axis=axes, keepdims=True) / count
            gx = inv[None, :, None, None] * (gxhat - t1 - xhat * t2)
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return apply_op("batch_norm2d", out, (x, gamma, beta), vjp)


def layer_norm2d(x, gamma, beta, eps: float = BN_EPS) -> Tensor:
    """Per-sample normalization over (C,H,W) with channelwise affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ConfigError(
            f"layer_norm2d shapes: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    axes = (1, 2, 3)
    m = x.data.mean(axis=axes, keepdims=True)
    v = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - m) * inv
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    count = x.shape[1] * x.shape[2] * x.shape[3]

    def vjp(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gamma.data[None, :, None, None]
        t1 = gxhat.sum(axis=axes, keepdims=True) / count
        t2 = (gxhat * xhat).sum(axis=axes, keepdims=True) / count
        gx = inv * (gxhat - t1 - xhat * t2)
        return gx, ggamma, gbeta

    return apply_op("layer_norm2d", out, (x, gamma, beta), vjp)


def fully_connected(x, weight, bias) -> Tensor:
    """Affine map: x[N,D] @ weight[D,K] + bias[K]."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0] \
            or bias.shape != (weight.shape[1],):
        raise ConfigError(
            f"fully_connected shapes: x {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    out = x.data @ weight.data + bias.data

    def vjp(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return apply_op("fully_connected", out, (x, weight, bias), vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return apply_op("relu", np.where(mask, x.data, 0.0), (x,), vjp)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    # stable two-branch form
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return apply_op("sigmoid", out, (x,), vjp)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return apply_op("softmax", out, (x,), vjp)


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ConfigError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return apply_op("global_avg_pool", out, (x,), vjp)


def global_max_pool(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ConfigError(f"global_max_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)  # first max in row-major order
    out = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]

    def vjp(g):
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
        return (gx.reshape(x.shape),)

    return apply_op("global_max_pool", out, (x,), vjp)


def max_pool2d(x, kernel: int = 2, stride: int = 2) -> Tensor:
    """Windowed max pool, no padding; ties go to the first position."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ConfigError(f"max_pool2d output empty for input {h}x{w}")
    sn, sc, sh, sw = x.data.strides
    view = as_strided(x.data, (n, c, oh, ow, kernel, kernel),
                      (sn, sc, stride * sh, stride * sw, sh, sw))
    windows = np.ascontiguousarray(view).reshape(n, c, oh, ow, kernel * kernel)
    idx = windows.argmax(axis=4)
    out = np.take_along_axis(windows, idx[..., None], axis=4)[..., 0]

    def vjp(g):
        gx = np.zeros_like(x.data)
        ni, ci, oi, oj = np.indices((n, c, oh, ow))
        rows = oi * stride + idx // kernel
        cols = oj * stride + idx % kernel
        np.add.at(gx, (ni, ci, rows, cols), g)
        return (gx,)

    return apply_op("max_pool2d", out, (x,), vjp)


def signed_sqrt_l2norm(x, eps: float = EPS_NORM) -> Tensor:
    """sign(x)*sqrt(|x|) per element, then each row scaled to unit L2 norm.

    Rows whose norm falls below ``eps`` are divided by ``eps`` instead, so a
    zero row stays zero.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise ConfigError(f"signed_sqrt_l2norm expects [N,D], got {x.shape}")
    y = np.sign(x.data) * np.sqrt(np.abs(x.data))
    norm = np.sqrt((y * y).sum(axis=1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = y / denom
    guarded = norm[:, 0] > eps

    def vjp(g):
        gy = g / denom
        proj = (g * y).sum(axis=1, keepdims=True) / (denom ** 3)
        gy -= np.where(guarded[:, None], y * proj, 0.0)
        absx = np.abs(x.data)
        dsqrt = np.zeros_like(absx)
        nz = absx > 0
        dsqrt[nz] = 0.5 / np.sqrt(absx[nz])
        return (gy * dsqrt,)

    return apply_op("signed_sqrt_l2norm", out, (x,), vjp)


def concat_channels(xs) -> Tensor:
    """Concatenate NCHW tensors along the channel axis, order preserved."""
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ConfigError("concat_channels needs at least one tensor")
    n, _, h, w = xs[0].shape
    for t in xs:
        if t.ndim != 4 or t.shape[0] != n or t.shape[2:] != (h, w):
            raise ConfigError(f"concat_channels mismatched shapes: {[t.shape for t in xs]}")
    out = np.concatenate([t.data for t in xs], axis=1)
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return apply_op("concat_channels", out, tuple(xs), vjp)


def scale_channels(x, a) -> Tensor:
    """out[n,c,h,w] = x[n,c,h,w] * a[n,c]."""
    x, a = as_tensor(x), as_tensor(a)
    if x.ndim != 4 or a.shape != x.shape[:2]:
        raise ConfigError(f"scale_channels shapes: x {x.shape}, a {a.shape}")
    out = x.data * a.data[:, :, None, None]

    def vjp(g):
        return g * a.data[:, :, None, None], (g * x.data).sum(axis=(2, 3))

    return apply_op("scale_channels", out, (x, a), vjp)
