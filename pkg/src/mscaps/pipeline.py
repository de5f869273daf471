"""Change detection end to end: difference image, patches, sampling, training, classification.

Also holds the synthetic speckled scene generator used in place of real
bitemporal acquisitions.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .capsules import class_lengths
from .loss import MarginParams, margin_loss_from_lengths
from .model import NetConfig, forward, init_params, predict_lengths
from .optim import Adam
from .rng import make_rng
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

PATCH_RANGE = (5, 17)
CLASSIFY_CHUNK = 512


@dataclass
class ScenePair:
    t1: np.ndarray
    t2: np.ndarray
    gt: Optional[np.ndarray] = None

    def __post_init__(self):
        self.t1 = np.asarray(self.t1, dtype=np.float64)
        self.t2 = np.asarray(self.t2, dtype=np.float64)
        if self.t1.ndim != 2 or self.t1.shape != self.t2.shape:
            raise ValueError(f"images must be 2-D with identical shapes, got {self.t1.shape} and {self.t2.shape}")
        if (self.t1 < 0).any() or (self.t2 < 0).any():
            raise ValueError("intensities must be nonnegative")
        if self.gt is not None:
            self.gt = np.asarray(self.gt).astype(np.uint8)
            if self.gt.shape != self.t1.shape:
                raise ValueError(f"ground truth shape {self.gt.shape} != image shape {self.t1.shape}")
            if not np.isin(self.gt, (0, 1)).all():
                raise ValueError("ground truth must be binary")

    @property
    def shape(self) -> tuple[int, int]:
        return self.t1.shape


@dataclass
class DifferenceImage:
    values: np.ndarray  # normalized to [0, 1]
    lo: float  # raw log-ratio range mapped to [0, 1]
    hi: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def log_ratio(t1: np.ndarray, t2: np.ndarray, eps: float = 1.0) -> np.ndarray:
    """Raw ``|log((t2 + eps) / (t1 + eps))|``."""
    t1, t2 = np.asarray(t1, dtype=np.float64), np.asarray(t2, dtype=np.float64)
    if t1.shape != t2.shape:
        raise ValueError(f"image shapes differ: {t1.shape} vs {t2.shape}")
    return np.abs(np.log(t2 + eps) - np.log(t1 + eps))


def normalize_di(raw: np.ndarray, lo: float | None = None, hi: float | None = None) -> DifferenceImage:
    """Min-max scale to [0, 1]; pass ``lo``/``hi`` to reuse a stored range (values are clipped)."""
    lo = float(raw.min()) if lo is None else float(lo)
    hi = float(raw.max()) if hi is None else float(hi)
    if hi > lo:
        values = np.clip((raw - lo) / (hi - lo), 0.0, 1.0)
    else:
        values = np.zeros_like(raw)
    return DifferenceImage(values, lo, hi)


def log_ratio_di(pair: ScenePair, eps: float = 1.0) -> DifferenceImage:
    return normalize_di(log_ratio(pair.t1, pair.t2, eps))


def _check_patch_size(r: int) -> None:
    if r % 2 == 0 or not PATCH_RANGE[0] <= r <= PATCH_RANGE[1]:
        raise ValueError(f"patch size must be odd and within {PATCH_RANGE[0]}..{PATCH_RANGE[1]}, got {r}")


def _mirror(values: np.ndarray, r: int) -> np.ndarray:
    # edge-inclusive mirror; numpy repeats the reflection for pads wider than the image
    return np.pad(values, r // 2, mode="symmetric")


def extract_patch(di: DifferenceImage | np.ndarray, center: tuple[int, int], r: int) -> np.ndarray:
    """``[r, r, 1]`` window centred on ``center`` with mirrored borders."""
    _check_patch_size(r)
    values = di.values if isinstance(di, DifferenceImage) else np.asarray(di, dtype=np.float64)
    i, j = center
    if not (0 <= i < values.shape[0] and 0 <= j < values.shape[1]):
        raise IndexError(f"center {center} outside image {values.shape}")
    return _mirror(values, r)[i : i + r, j : j + r, None].copy()


def extract_patches(di: DifferenceImage | np.ndarray, rows: np.ndarray, cols: np.ndarray, r: int) -> np.ndarray:
    """Vectorized ``extract_patch`` for many centres: ``[n, r, r, 1]``."""
    _check_patch_size(r)
    values = di.values if isinstance(di, DifferenceImage) else np.asarray(di, dtype=np.float64)
    windows = sliding_window_view(_mirror(values, r), (r, r))
    return windows[np.asarray(rows), np.asarray(cols)][..., None].copy()


@dataclass
class SampleSet:
    patches: np.ndarray  # [n, r, r, 1]
    labels: np.ndarray  # [n] in {0, 1}
    rows: np.ndarray
    cols: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_counts(self) -> tuple[int, int]:
        return int((self.labels == 0).sum()), int((self.labels == 1).sum())


def select_samples(
    di: DifferenceImage,
    gt: np.ndarray,
    count: int,
    r: int = 9,
    balanced: bool = True,
    rng: np.random.Generator | None = None,
) -> SampleSet:
    """Random pixel positions without replacement, labelled from ``gt``.

    ``balanced`` draws ``count // 2`` unchanged and ``count - count // 2``
    changed pixels.
    """
    rng = make_rng(0, "sample") if rng is None else rng
    gt = np.asarray(gt)
    if gt.shape != di.shape:
        raise ValueError(f"ground truth shape {gt.shape} != difference image shape {di.shape}")
    flat = gt.reshape(-1)
    if count < 1 or count > flat.size:
        raise ValueError(f"sample count must be within 1..{flat.size}, got {count}")
    if balanced:
        picks = []
        for label, want in ((0, count // 2), (1, count - count // 2)):
            pool = np.flatnonzero(flat == label)
            if want > pool.size:
                raise ValueError(f"requested {want} samples of class {label}, only {pool.size} available")
            picks.append(rng.choice(pool, size=want, replace=False))
        idx = np.concatenate(picks)
        idx = idx[rng.permutation(idx.size)]
    else:
        idx = rng.choice(flat.size, size=count, replace=False)
    rows, cols = np.unravel_index(idx, gt.shape)
    return SampleSet(extract_patches(di, rows, cols, r), flat[idx].astype(np.int64), rows, cols)


# ----------------------------------------------------------------------------
# model artifact and training


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    stop_at_accuracy: Optional[float] = None  # stop once a full pass over the samples reaches this
    margin: MarginParams = field(default_factory=MarginParams)


@dataclass
class ModelArtifact:
    net: NetConfig
    params: dict[str, np.ndarray]
    di_lo: float = 0.0
    di_hi: float = 1.0
    seed: int = 0
    extra: dict[str, str] = field(default_factory=dict)

    @property
    def patch(self) -> int:
        return self.net.patch

    @classmethod
    def initialize(cls, net: NetConfig, seed: int = 0, di: DifferenceImage | None = None) -> "ModelArtifact":
        params = {k: t.data for k, t in init_params(net, make_rng(seed, "init")).items()}
        lo, hi = (di.lo, di.hi) if di is not None else (0.0, 1.0)
        return cls(net, params, lo, hi, seed)

    def lengths(self, patches: np.ndarray) -> np.ndarray:
        return predict_lengths(patches, self.net, self.params)

    def predict(self, patches: np.ndarray) -> np.ndarray:
        return np.argmax(self.lengths(patches), axis=1).astype(np.uint8)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    train_acc: float


def train(
    samples: SampleSet,
    net: NetConfig,
    config: TrainConfig = TrainConfig(),
    di: DifferenceImage | None = None,
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> tuple[ModelArtifact, list[EpochStats]]:
    """Mini-batch Adam on the margin loss.

    The trace records the mean batch loss and running accuracy of each
    epoch (accuracy of the predictions made before each batch's update).
    """
    if len(samples) == 0:
        raise ValueError("no training samples")
    if samples.patches.shape[1:] != (net.patch, net.patch, net.in_channels):
        raise ValueError(f"sample patches {samples.patches.shape[1:]} do not match network patch {net.patch}")
    model = ModelArtifact.initialize(net, config.seed, di)
    params = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in model.params.items()}
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.adam_eps)
    shuffle_rng = make_rng(config.seed, "shuffle")
    n = len(samples)
    trace: list[EpochStats] = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for batch_no, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            opt.zero_grad()
            lengths = class_lengths(forward(Tensor(samples.patches[idx]), net, params))
            loss = margin_loss_from_lengths(lengths, samples.labels[idx], config.margin)
            if not math.isfinite(loss.item()):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {batch_no}")
            try:
                loss.backward()
                opt.step()
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}, batch {batch_no}: {exc}") from exc
            loss_sum += loss.item() * len(idx)
            correct += int((np.argmax(lengths.data, axis=1) == samples.labels[idx]).sum())
        stats = EpochStats(epoch, loss_sum / n, correct / n)
        trace.append(stats)
        log.info("epoch %d loss %.5f acc %.4f", stats.epoch, stats.loss, stats.train_acc)
        if on_epoch is not None:
            on_epoch(stats)
        if config.stop_at_accuracy is not None:
            params_np = {k: t.data for k, t in params.items()}
            full_acc = float((np.argmax(predict_lengths(samples.patches, net, params_np), axis=1) == samples.labels).mean())
            if full_acc >= config.stop_at_accuracy:
                break
    model = replace(model, params={k: t.data.copy() for k, t in params.items()})
    return model, trace


def _chunk_lengths(model: ModelArtifact, values: np.ndarray, flat_idx: np.ndarray) -> np.ndarray:
    rows, cols = np.unravel_index(flat_idx, values.shape)
    return model.lengths(extract_patches(values, rows, cols, model.patch))


def classify_lengths(model: ModelArtifact, di: DifferenceImage, threads: int = 1, chunk: int = CLASSIFY_CHUNK) -> np.ndarray:
    """Class-vector lengths for every pixel, ``[h, w, 2]``.

    Pixels are processed in fixed chunks whatever the thread count, so the
    result does not depend on ``threads``.
    """
    values = di.values
    total = values.size
    chunks = [np.arange(s, min(s + chunk, total)) for s in range(0, total, chunk)]
    if threads <= 1:
        parts = [_chunk_lengths(model, values, c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _chunk_lengths(model, values, c), chunks))
    return np.concatenate(parts).reshape(values.shape + (2,))


def classify_image(model: ModelArtifact, di: DifferenceImage, threads: int = 1, chunk: int = CLASSIFY_CHUNK) -> np.ndarray:
    """Binary change map (1 = changed) with the same shape as ``di``."""
    return np.argmax(classify_lengths(model, di, threads, chunk), axis=-1).astype(np.uint8)


# ----------------------------------------------------------------------------
# synthetic scenes


def _region_masks(size: int, rng: np.random.Generator, n: int, radius: tuple[float, float]) -> list[np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size]
    masks = []
    for _ in range(n):
        ry, rx = rng.uniform(radius[0], radius[1], size=2)
        cy, cx = rng.uniform(ry, size - ry), rng.uniform(rx, size - rx)
        if rng.random() < 0.5:
            masks.append(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0)
        else:
            masks.append((np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx))
    return masks


def reflectivity_background(size: int, rng: np.random.Generator, cells: int = 12, levels=(25.0, 80.0)) -> np.ndarray:
    """Piecewise-constant reflectivity from a random Voronoi partition."""
    seeds = rng.uniform(0, size, size=(cells, 2))
    level = rng.uniform(levels[0], levels[1], size=cells)
    yy, xx = np.mgrid[0:size, 0:size]
    d2 = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    return level[np.argmin(d2, axis=-1)]


def gamma_speckle(shape, looks: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-mean multiplicative speckle for ``looks``-look intensity: Gamma(L, 1/L)."""
    return rng.gamma(shape=looks, scale=1.0 / looks, size=shape)


def synth_scene(
    size: int = 128,
    num_regions: int = 4,
    looks: float = 4.0,
    contrast: float = 3.0,
    seed: int = 0,
    radius: tuple[float, float] | None = None,
) -> ScenePair:
    """Bitemporal speckled scene on an 8-bit scale.

    The second date multiplies reflectivity by ``contrast`` inside
    ``num_regions`` random ellipses/rectangles; ``gt`` marks those pixels
    (all zeros when ``contrast == 1``). Intensities are rounded and clipped
    to 0..255 so the scene survives an 8-bit PGM round trip unchanged.
    """
    if size < 32:
        raise ValueError(f"scene size must be >= 32, got {size}")
    if looks < 1:
        raise ValueError(f"looks must be >= 1, got {looks}")
    if contrast <= 0:
        raise ValueError(f"contrast must be positive, got {contrast}")
    radius = (size / 16, size / 6) if radius is None else radius
    if radius[0] <= 0 or radius[1] < radius[0] or 2 * radius[1] > size:
        raise ValueError(f"region radius range {radius} does not fit a {size}x{size} scene")

    scene_rng = make_rng(seed, "scene")
    refl1 = reflectivity_background(size, scene_rng)
    changed = np.zeros((size, size), dtype=bool)
    for mask in _region_masks(size, scene_rng, num_regions, radius):
        changed |= mask
    refl2 = np.where(changed, refl1 * contrast, refl1)
    speckle_rng = make_rng(seed, "speckle")
    t1 = refl1 * gamma_speckle(refl1.shape, looks, speckle_rng)
    t2 = refl2 * gamma_speckle(refl2.shape, looks, speckle_rng)
    gt = (changed & (contrast != 1.0)).astype(np.uint8)
    quantize = lambda im: np.clip(np.rint(im), 0, 255)  # noqa: E731
    return ScenePair(quantize(t1), quantize(t2), gt)
