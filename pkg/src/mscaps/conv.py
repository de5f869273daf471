"""Convolution-family ops on channels-last tensors.

Inputs are ``[h, w, c]`` or batched ``[n, h, w, c]``. Convolutions are
cross-correlations (no kernel flip), as usual in neural-network code.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, TensorError, as_tensor, mean

PADDINGS = ("same", "valid")


def _batched(x: Tensor, op: str) -> bool:
    if x.ndim == 3:
        return False
    if x.ndim == 4:
        return True
    raise TensorError(f"{op}: expected [h,w,c] or [n,h,w,c], got {x.shape}")


def conv_output_size(size: int, k: int, dilation: int, padding: str) -> int:
    if padding == "same":
        return size
    return size - (k - 1) * dilation


def _check_conv_args(x_shape, kernel_shape, bias_shape, dilation, padding):
    if padding not in PADDINGS:
        raise TensorError(f"conv2d: padding must be one of {PADDINGS}, got {padding!r}")
    if len(kernel_shape) != 4 or kernel_shape[0] != kernel_shape[1]:
        raise TensorError(f"conv2d: kernel must be [k,k,c_in,c_out], got {kernel_shape}")
    k, _, c_in, c_out = kernel_shape
    if k % 2 == 0:
        raise TensorError(f"conv2d: kernel size must be odd, got {k}")
    if int(dilation) != dilation or dilation < 1:
        raise TensorError(f"conv2d: dilation must be a positive integer, got {dilation}")
    if x_shape[-1] != c_in:
        raise TensorError(f"conv2d: input has {x_shape[-1]} channels, kernel expects {c_in}")
    if tuple(bias_shape) != (c_out,):
        raise TensorError(f"conv2d: bias must have shape ({c_out},), got {tuple(bias_shape)}")
    extent = (k - 1) * dilation + 1
    h, w = x_shape[-3], x_shape[-2]
    if padding == "valid" and extent > min(h, w):
        raise TensorError(f"conv2d: effective kernel extent {extent} exceeds input {h}x{w} under valid padding")


def _pad_same(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, dilation: int = 1, padding: str = "same") -> Tensor:
    """Dilated 2-D convolution via im2col; zero padding for ``same``."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    batched = _batched(x, "conv2d")
    _check_conv_args(x.shape, kernel.shape, bias.shape, dilation, padding)
    k, _, c_in, c_out = kernel.shape
    xb = x.data if batched else x.data[None]
    n, h, w, _ = xb.shape
    pad = (k - 1) * dilation // 2 if padding == "same" else 0
    xp = _pad_same(xb, pad)
    ho, wo = conv_output_size(h, k, dilation, padding), conv_output_size(w, k, dilation, padding)

    taps = [(ky, kx) for ky in range(k) for kx in range(k)]
    cols = np.empty((n, ho, wo, k * k, c_in))
    for t, (ky, kx) in enumerate(taps):
        cols[:, :, :, t, :] = xp[:, ky * dilation : ky * dilation + ho, kx * dilation : kx * dilation + wo, :]
    cols = cols.reshape(n * ho * wo, k * k * c_in)
    kmat = kernel.data.reshape(k * k * c_in, c_out)
    out = (cols @ kmat + bias.data).reshape(n, ho, wo, c_out)

    def bw(g):
        g2 = g.reshape(n * ho * wo, c_out)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat.T).reshape(n, ho, wo, k * k, c_in)
            gxp = np.zeros_like(xp)
            for t, (ky, kx) in enumerate(taps):
                gxp[:, ky * dilation : ky * dilation + ho, kx * dilation : kx * dilation + wo, :] += gcols[:, :, :, t, :]
            gx = gxp[:, pad : pad + h, pad : pad + w, :]
            gx = gx if batched else gx[0]
        return gx, gk, gb

    return Tensor.from_op(out if batched else out[0], (x, kernel, bias), bw, "conv2d")


def conv2d_reference(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, dilation: int = 1, padding: str = "same") -> np.ndarray:
    """Direct six-loop convolution on a single ``[h, w, c]`` image."""
    _check_conv_args(x.shape, kernel.shape, bias.shape, dilation, padding)
    k, _, c_in, c_out = kernel.shape
    h, w, _ = x.shape
    pad = (k - 1) * dilation // 2 if padding == "same" else 0
    ho, wo = conv_output_size(h, k, dilation, padding), conv_output_size(w, k, dilation, padding)
    out = np.zeros((ho, wo, c_out))
    for i in range(ho):
        for j in range(wo):
            for co in range(c_out):
                acc = bias[co]
                for ky in range(k):
                    for kx in range(k):
                        yy = i + ky * dilation - pad
                        xx = j + kx * dilation - pad
                        if 0 <= yy < h and 0 <= xx < w:
                            for ci in range(c_in):
                                acc += x[yy, xx, ci] * kernel[ky, kx, ci, co]
                out[i, j, co] = acc
    return out


def conv1x1(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-pixel linear map ``[.., c_in] -> [.., c_out]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _batched(x, "conv1x1")
    if kernel.ndim != 2 or kernel.shape[0] != x.shape[-1]:
        raise TensorError(f"conv1x1: input has {x.shape[-1]} channels, kernel is {kernel.shape}")
    c_out = kernel.shape[1]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise TensorError(f"conv1x1: bias must have shape ({c_out},), got {bias.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ kernel.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, c_out)

    def bw(g):
        g2 = g.reshape(-1, c_out)
        gx = (g2 @ kernel.data.T).reshape(x.shape) if x.requires_grad else None
        gk = x2.T @ g2 if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor.from_op(out, parents, bw, "conv1x1")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: ``[.., h, w, c] -> [.., 1, 1, c]``."""
    x = as_tensor(x)
    _batched(x, "global_avg_pool")
    return mean(x, axis=(-3, -2), keepdims=True)


def conv1d_channels(x: Tensor, kernel: Tensor) -> Tensor:
    """Zero-padded 1-D correlation along the channel axis of ``[.., 1, 1, c]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 1 or kernel.shape[0] % 2 == 0:
        raise TensorError(f"conv1d_channels: kernel must be 1-D with odd length, got {kernel.shape}")
    if x.ndim < 3 or x.shape[-3:-1] != (1, 1):
        raise TensorError(f"conv1d_channels: expected [.., 1, 1, c], got {x.shape}")
    kl = kernel.shape[0]
    half = kl // 2
    c = x.shape[-1]
    pad_width = [(0, 0)] * (x.ndim - 1) + [(half, half)]
    xp = np.pad(x.data, pad_width)
    out = np.zeros_like(x.data)
    for t in range(kl):
        out += kernel.data[t] * xp[..., t : t + c]

    def bw(g):
        gk = np.array([(g * xp[..., t : t + c]).sum() for t in range(kl)]) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for t in range(kl):
                gxp[..., t : t + c] += kernel.data[t] * g
            gx = gxp[..., half : half + c]
        return gx, gk

    return Tensor.from_op(out, (x, kernel), bw, "conv1d_channels")
