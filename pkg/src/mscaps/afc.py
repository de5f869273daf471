"""Adaptive fusion convolution: dilated branches, channel attention, 1x1 matching, summation."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .conv import conv1d_channels, conv1x1, conv2d, global_avg_pool
from .tensor import Tensor, TensorError, add, channel_broadcast_mul, relu, sigmoid

DILATIONS = (1, 2, 3)
MIN_PATCH = 5


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def attention_key(branch: int, shared: bool) -> str:
    return "afc.att" if shared else f"afc.att{branch}"


def init_afc_params(
    rng: np.random.Generator,
    c_in: int = 1,
    c0: int = 32,
    c_fuse: int = 32,
    k1d: int = 3,
    shared_attention: bool = False,
) -> dict[str, Tensor]:
    params: dict[str, np.ndarray] = {}
    for i, _ in enumerate(DILATIONS, start=1):
        params[f"afc.conv{i}.w"] = he_normal(rng, (3, 3, c_in, c0), 9 * c_in)
        params[f"afc.conv{i}.b"] = np.zeros(c0)
        key = attention_key(i, shared_attention)
        if key not in params:
            params[key] = he_normal(rng, (k1d,), k1d)
        params[f"afc.match{i}.w"] = he_normal(rng, (c0, c_fuse), c0)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


def channel_attention(f_in: Tensor, kernel: Tensor) -> Tensor:
    """Rescale channels by sigmoid(conv1d(GAP(f_in))); every factor lies in (0, 1)."""
    weights = sigmoid(conv1d_channels(global_avg_pool(f_in), kernel))
    return channel_broadcast_mul(f_in, weights)


def afc_branch(patch: Tensor, params: Mapping[str, Tensor], branch: int) -> Tensor:
    """One dilated branch after its dimension-matching 1x1 conv (1-based ``branch``)."""
    dilation = DILATIONS[branch - 1]
    shared = "afc.att" in params
    h = relu(conv2d(patch, params[f"afc.conv{branch}.w"], params[f"afc.conv{branch}.b"], dilation, "same"))
    attended = channel_attention(h, params[attention_key(branch, shared)])
    return conv1x1(attended, params[f"afc.match{branch}.w"])


def afc_forward(patch: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Fused features with the same spatial size as ``patch``."""
    if min(patch.shape[-3], patch.shape[-2]) < MIN_PATCH:
        raise TensorError(f"afc_forward: patch {patch.shape[-3]}x{patch.shape[-2]} smaller than {MIN_PATCH}x{MIN_PATCH}")
    fused = afc_branch(patch, params, 1)
    for branch in range(2, len(DILATIONS) + 1):
        fused = add(fused, afc_branch(patch, params, branch))
    return fused
