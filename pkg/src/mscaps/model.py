"""Ms-CapsNet assembly: feature stem, one or two capsule scales, summed class vectors.

Variants (ablation set):

* ``full`` -- AFC stem, primary capsules at kernel 3 and 5.
* ``no_afc`` -- plain 3x3 conv + ReLU stem, both scales.
* ``no_multiscale`` -- AFC stem, kernel-3 scale only.
* ``capsnet`` -- plain stem, kernel-3 scale only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from .afc import MIN_PATCH, afc_forward, he_normal, init_afc_params
from .capsules import CAPSULE_DIM, CLASS_DIM, NUM_CLASSES, class_capsules, class_lengths, conv_capsule, fuse_class_vectors, primary_capsules
from .conv import conv2d
from .tensor import Tensor, relu

VARIANTS = ("capsnet", "no_afc", "no_multiscale", "full")


@dataclass(frozen=True)
class NetConfig:
    variant: str = "full"
    patch: int = 9
    in_channels: int = 1
    afc_channels: int = 32
    fuse_channels: int = 32
    attention_kernel: int = 3
    shared_attention: bool = False
    primary_channels: int = 32
    conv_caps_kernel: int = 3
    conv_caps_types: int = 4
    conv_caps_dim: int = CAPSULE_DIM
    routing_iterations: int = 3
    route_grad: str = "final_only"
    weight_range: float = 0.5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.patch % 2 == 0 or self.patch < MIN_PATCH:
            raise ValueError(f"patch size must be odd and >= {MIN_PATCH}, got {self.patch}")
        if self.primary_channels % CAPSULE_DIM:
            raise ValueError(f"primary_channels must be a multiple of {CAPSULE_DIM}")

    @property
    def uses_afc(self) -> bool:
        return self.variant in ("full", "no_multiscale")

    @property
    def scales(self) -> tuple[int, ...]:
        return (3, 5) if self.variant in ("full", "no_afc") else (3,)

    def branch_geometry(self, k: int) -> tuple[int, int, int]:
        """(primary grid size, conv-capsule window, conv-capsule grid size) for one scale."""
        w1 = self.patch - k + 1
        kcc = min(self.conv_caps_kernel, w1)
        return w1, kcc, w1 - kcc + 1

    def to_dict(self) -> dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, object]) -> "NetConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            if f.type == "bool" and isinstance(raw, str):
                kw[f.name] = raw.lower() in ("1", "true", "yes")
            elif f.type in ("int", "float"):
                kw[f.name] = (int if f.type == "int" else float)(raw)
            else:
                kw[f.name] = raw
        return cls(**kw)


def init_params(config: NetConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameters: He-normal conv kernels, zero biases, uniform capsule transforms."""
    c = config
    params: dict[str, Tensor] = {}
    if c.uses_afc:
        params.update(init_afc_params(rng, c.in_channels, c.afc_channels, c.fuse_channels, c.attention_kernel, c.shared_attention))
    else:
        params["stem.w"] = Tensor(he_normal(rng, (3, 3, c.in_channels, c.fuse_channels), 9 * c.in_channels), True, "stem.w")
        params["stem.b"] = Tensor(np.zeros(c.fuse_channels), True, "stem.b")

    n_primary = c.primary_channels // CAPSULE_DIM
    for k in c.scales:
        w1, kcc, w2 = c.branch_geometry(k)
        arrays = {
            f"primary{k}.w": he_normal(rng, (k, k, c.fuse_channels, c.primary_channels), k * k * c.fuse_channels),
            f"primary{k}.b": np.zeros(c.primary_channels),
            f"convcaps{k}.w": rng.uniform(
                -c.weight_range, c.weight_range, (kcc, kcc, n_primary, c.conv_caps_types, c.conv_caps_dim, CAPSULE_DIM)
            ),
            f"classcaps{k}.w": rng.uniform(
                -c.weight_range, c.weight_range, (w2 * w2 * c.conv_caps_types, NUM_CLASSES, CLASS_DIM, c.conv_caps_dim)
            ),
        }
        params.update({name: Tensor(v, True, name) for name, v in arrays.items()})
    return params


def features(x: Tensor, config: NetConfig, params: Mapping[str, Tensor]) -> Tensor:
    if config.uses_afc:
        return afc_forward(x, params)
    return relu(conv2d(x, params["stem.w"], params["stem.b"], 1, "same"))


def scale_branch(feat: Tensor, k: int, config: NetConfig, params: Mapping[str, Tensor]) -> Tensor:
    """Class vectors ``[n, 2, 16]`` from one primary-capsule scale."""
    caps = primary_capsules(feat, params[f"primary{k}.w"], params[f"primary{k}.b"])
    caps, _ = conv_capsule(caps, params[f"convcaps{k}.w"], config.routing_iterations, config.route_grad)
    out, _ = class_capsules(caps, params[f"classcaps{k}.w"], config.routing_iterations, config.route_grad)
    return out


def forward(x: Tensor, config: NetConfig, params: Mapping[str, Tensor]) -> Tensor:
    """Patches ``[n, r, r, c_in]`` to fused class vectors ``[n, 2, 16]``."""
    if x.ndim != 4 or x.shape[1:] != (config.patch, config.patch, config.in_channels):
        raise ValueError(f"expected patches [n, {config.patch}, {config.patch}, {config.in_channels}], got {x.shape}")
    feat = features(x, config, params)
    out = None
    for k in config.scales:
        v = scale_branch(feat, k, config, params)
        out = v if out is None else fuse_class_vectors(out, v)
    return out


def predict_lengths(x: np.ndarray, config: NetConfig, params: Mapping[str, np.ndarray]) -> np.ndarray:
    """Class-vector lengths ``[n, 2]`` without recording a graph."""
    consts = {k: Tensor(v) for k, v in params.items()}
    return class_lengths(forward(Tensor(x), config, consts)).data
