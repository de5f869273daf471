"""Capsule margin loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .capsules import class_lengths
from .tensor import Tensor, add, add_scalar, mean, mul, relu, reshape, scalar_mul, square, sum


@dataclass(frozen=True)
class MarginParams:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ValueError(f"need 0 < m_minus < m_plus < 1, got {self.m_minus}, {self.m_plus}")
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")


def margin_loss_from_lengths(lengths: Tensor, labels, params: MarginParams = MarginParams()) -> Tensor:
    """Mean over the batch of the per-sample loss summed over both classes.

    ``lengths`` is ``[batch, classes]``; ``labels`` holds class indices.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    onehot = np.zeros(lengths.shape)
    onehot[np.arange(lengths.shape[0]), labels] = 1.0
    present = square(relu(add_scalar(scalar_mul(lengths, -1.0), params.m_plus)))
    absent = square(relu(add_scalar(lengths, -params.m_minus)))
    per_class = add(mul(present, onehot), scalar_mul(mul(absent, 1.0 - onehot), params.lam))
    return mean(sum(per_class, axis=-1))


def margin_loss(class_vectors: Tensor, labels, params: MarginParams = MarginParams()) -> Tensor:
    """Margin loss on class vectors ``[batch, classes, dim]`` (or a single ``[classes, dim]``)."""
    if class_vectors.ndim == 2:
        class_vectors = reshape(class_vectors, (1,) + class_vectors.shape)
    return margin_loss_from_lengths(class_lengths(class_vectors), labels, params)
