"""Capsule layers and dynamic routing.

Capsule grids are ``[n, w, w, types, dim]`` (batched) tensors. Routing takes
prediction vectors ``u[..., num_in, num_out, dim]`` and returns the output
capsules ``v[..., num_out, dim]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import conv2d
from .tensor import Tensor, TensorError, add, as_tensor, einsum, reshape, softmax, softmax_array, transpose

CAPSULE_DIM = 8
CLASS_DIM = 16
NUM_CLASSES = 2
SQUASH_EPS = 1e-9
ROUTE_GRAD_MODES = ("final_only", "full")


def squash_array(s: np.ndarray, axis: int = -1) -> np.ndarray:
    q = (s * s).sum(axis=axis, keepdims=True)
    n = np.sqrt(q)
    return s * (q / ((1.0 + q) * (n + SQUASH_EPS)))


def squash(s: Tensor) -> Tensor:
    """Squash along the last axis: length ``|s|^2/(1+|s|^2)``, direction kept, ``squash(0) = 0``."""
    s = as_tensor(s)
    x = s.data
    q = (x * x).sum(axis=-1, keepdims=True)
    n = np.sqrt(q)
    ne = n + SQUASH_EPS
    scale = q / ((1.0 + q) * ne)

    def bw(g):
        # d scale / d q, written so it stays finite at q = 0
        dscale = (ne - 0.5 * n * (1.0 + q)) / ((1.0 + q) ** 2 * ne**2)
        return (scale * g + 2.0 * dscale * x * (g * x).sum(axis=-1, keepdims=True),)

    return Tensor.from_op(x * scale, (s,), bw, "squash")


def vector_norm(v: Tensor) -> Tensor:
    """Euclidean length along the last axis; the gradient at the zero vector is taken as 0."""
    v = as_tensor(v)
    n = np.sqrt((v.data * v.data).sum(axis=-1))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n[..., None] > 0, v.data * (g / safe)[..., None], 0.0),)

    return Tensor.from_op(n, (v,), bw, "vector_norm")


@dataclass
class RoutingState:
    b: np.ndarray  # agreement logits [..., num_in, num_out]
    c: np.ndarray  # couplings used for the returned v, c = softmax(b) over num_out
    iterations: int


def route(u: Tensor, iterations: int = 3, route_grad: str = "final_only") -> tuple[Tensor, RoutingState]:
    """Dynamic routing by agreement.

    Each iteration: ``c = softmax(b)`` over outputs, ``s_j = sum_i c_ij u_ij``,
    ``v_j = squash(s_j)``; between iterations ``b_ij += u_ij . v_j``. With
    ``final_only`` the couplings are treated as constants and gradients reach
    ``u`` only through the last weighted sum; ``full`` differentiates through
    every iteration.
    """
    u = as_tensor(u)
    if iterations < 1:
        raise ValueError(f"route: iterations must be >= 1, got {iterations}")
    if route_grad not in ROUTE_GRAD_MODES:
        raise ValueError(f"route: route_grad must be one of {ROUTE_GRAD_MODES}, got {route_grad!r}")
    if u.ndim < 3:
        raise TensorError(f"route: predictions must be [..., num_in, num_out, dim], got {u.shape}")

    lead, (num_in, num_out, dim) = u.shape[:-3], u.shape[-3:]
    u = reshape(u, (-1, num_in, num_out, dim))

    if route_grad == "full":
        b = Tensor(np.zeros(u.shape[:-1]))
        for it in range(iterations):
            c = softmax(b, axis=-1)
            v = squash(einsum("bij,bijd->bjd", c, u))
            if it < iterations - 1:
                b = add(b, einsum("bijd,bjd->bij", u, v))
        b, c = b.data, c.data
    else:
        ut = u.data.transpose(0, 2, 1, 3)  # [b, j, i, d]; batched matmuls beat einsum here
        b = np.zeros(u.shape[:-1])
        c = np.full(b.shape, 1.0 / num_out)  # softmax of the zero logits
        for it in range(iterations - 1):
            s_np = np.matmul(c.transpose(0, 2, 1)[:, :, None, :], ut)[:, :, 0]
            v_np = squash_array(s_np)
            b = b + np.matmul(ut, v_np[..., None])[..., 0].transpose(0, 2, 1)
            c = softmax_array(b, axis=-1)
        v = squash(einsum("bij,bijd->bjd", Tensor(c), u))

    state = RoutingState(b=b.reshape(lead + (num_in, num_out)), c=c.reshape(lead + (num_in, num_out)), iterations=iterations)
    return reshape(v, lead + (num_out, dim)), state


def capsule_transform(x: Tensor, weights: Tensor) -> Tensor:
    """Per-input linear maps: ``x[n, i, e]`` with ``weights[i, e, o]`` gives ``[n, i, o]``."""
    x, weights = as_tensor(x), as_tensor(weights)
    if x.ndim != 3 or weights.ndim != 3 or x.shape[1:] != weights.shape[:2]:
        raise TensorError(f"capsule_transform: cannot map {x.shape} with {weights.shape}")
    xt = x.data.transpose(1, 0, 2)  # [i, n, e]
    out = np.matmul(xt, weights.data).transpose(1, 0, 2)

    def bw(g):
        gt = g.transpose(1, 0, 2)  # [i, n, o]
        gx = np.matmul(gt, weights.data.transpose(0, 2, 1)).transpose(1, 0, 2) if x.requires_grad else None
        gw = np.matmul(xt.transpose(0, 2, 1), gt) if weights.requires_grad else None
        return gx, gw

    return Tensor.from_op(np.ascontiguousarray(out), (x, weights), bw, "capsule_transform")


def primary_capsules(features: Tensor, kernel: Tensor, bias: Tensor, dim: int = CAPSULE_DIM) -> Tensor:
    """Valid conv then reshape ``[.., w1, w1, c] -> [.., w1, w1, c/dim, dim]`` and squash."""
    c = kernel.shape[-1]
    if c % dim:
        raise TensorError(f"primary_capsules: {c} channels not divisible by capsule dim {dim}")
    out = conv2d(features, kernel, bias, 1, "valid")
    return squash(reshape(out, out.shape[:-1] + (c // dim, dim)))


def unfold_grid(x: Tensor, k: int) -> Tensor:
    """Sliding ``k x k`` windows: ``[n, g, g, t, d] -> [n, g-k+1, g-k+1, k, k, t, d]``."""
    n, gh, gw, t, d = x.shape
    if k > min(gh, gw):
        raise TensorError(f"conv_capsule: window {k} exceeds grid {gh}x{gw}")
    oh, ow = gh - k + 1, gw - k + 1
    out = np.empty((n, oh, ow, k, k, t, d))
    for ky in range(k):
        for kx in range(k):
            out[:, :, :, ky, kx] = x.data[:, ky : ky + oh, kx : kx + ow]

    def bw(g):
        gx = np.zeros(x.shape)
        for ky in range(k):
            for kx in range(k):
                gx[:, ky : ky + oh, kx : kx + ow] += g[:, :, :, ky, kx]
        return (gx,)

    return Tensor.from_op(out, (x,), bw, "unfold_grid")


def conv_capsule(
    grid: Tensor, weights: Tensor, iterations: int = 3, route_grad: str = "final_only"
) -> tuple[Tensor, RoutingState]:
    """Locally connected capsule layer with transforms shared over grid positions.

    ``weights`` is ``[k, k, t_in, t_out, d_out, d_in]``: one matrix per
    (window offset, input type, output type). Each output position routes
    the ``k*k*t_in`` capsules in its window.
    """
    k, _, t_in, t_out, d_out, d_in = weights.shape
    if grid.shape[-2:] != (t_in, d_in):
        raise TensorError(f"conv_capsule: grid {grid.shape} does not match transforms {weights.shape}")
    windows = unfold_grid(grid, k)
    n, oh, ow = windows.shape[:3]
    num_in = k * k * t_in
    flat = reshape(windows, (n * oh * ow, num_in, d_in))
    w = reshape(transpose(weights, (0, 1, 2, 5, 3, 4)), (num_in, d_in, t_out * d_out))
    u = reshape(capsule_transform(flat, w), (n * oh * ow, num_in, t_out, d_out))
    v, state = route(u, iterations, route_grad)
    return reshape(v, (n, oh, ow, t_out, d_out)), state


def class_capsules(
    grid: Tensor, weights: Tensor, iterations: int = 3, route_grad: str = "final_only"
) -> tuple[Tensor, RoutingState]:
    """Fully connected capsules: every grid capsule predicts each class vector.

    ``weights`` is ``[num_in, num_classes, class_dim, d_in]``.
    """
    n = grid.shape[0]
    num_in = int(np.prod(grid.shape[1:-1]))
    if weights.shape[0] != num_in or weights.shape[-1] != grid.shape[-1]:
        raise TensorError(f"class_capsules: grid {grid.shape} does not match transforms {weights.shape}")
    flat = reshape(grid, (n, num_in, grid.shape[-1]))
    _, n_cls, d_cls, d_in = weights.shape
    w = reshape(transpose(weights, (0, 3, 1, 2)), (num_in, d_in, n_cls * d_cls))
    u = reshape(capsule_transform(flat, w), (n, num_in, n_cls, d_cls))
    return route(u, iterations, route_grad)


def fuse_class_vectors(v1: Tensor, v2: Tensor) -> Tensor:
    return add(v1, v2)


def class_lengths(v: Tensor) -> Tensor:
    return vector_norm(v)
