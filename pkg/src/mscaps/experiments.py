"""Repeatable runs over a scene: ablation variants and patch-size sweeps."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .metrics import MetricsReport, evaluate
from .model import VARIANTS, NetConfig
from .pipeline import ScenePair, TrainConfig, classify_image, log_ratio_di, select_samples, train
from .rng import make_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunResult:
    seed: int
    variant: str
    patch: int
    report: MetricsReport


def run_once(
    scene: ScenePair,
    net: NetConfig,
    train_cfg: TrainConfig,
    samples: int,
    seed: int,
    threads: int = 1,
    eps: float = 1.0,
) -> RunResult:
    """Sample, train and classify the whole scene with one seed."""
    if scene.gt is None:
        raise ValueError("scene has no ground truth")
    di = log_ratio_di(scene, eps)
    sample_set = select_samples(di, scene.gt, samples, net.patch, rng=make_rng(seed, "sample"))
    model, _ = train(sample_set, net, replace(train_cfg, seed=seed), di)
    report = evaluate(classify_image(model, di, threads), scene.gt)
    log.info("seed %d variant %s r=%d: PCC %.2f KC %.2f", seed, net.variant, net.patch, report.pcc, report.kc)
    return RunResult(seed, net.variant, net.patch, report)


def ablation(
    scene: ScenePair,
    seeds: Iterable[int],
    net: NetConfig = NetConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    samples: int = 1000,
    threads: int = 1,
) -> list[RunResult]:
    """All four variants per seed, in the order capsnet, no_afc, no_multiscale, full."""
    return [
        run_once(scene, replace(net, variant=variant), train_cfg, samples, seed, threads)
        for seed in seeds
        for variant in VARIANTS
    ]


def patch_sweep(
    scene: ScenePair,
    patches: Sequence[int],
    seed: int = 0,
    net: NetConfig = NetConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    samples: int = 1000,
    threads: int = 1,
) -> list[RunResult]:
    return [run_once(scene, replace(net, patch=r), train_cfg, samples, seed, threads) for r in patches]


def results_csv(results: Sequence[RunResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["seed", "variant", "patch", "pcc", "kc", "oe", "fp", "fn"])
    for r in results:
        rep = r.report
        writer.writerow([r.seed, r.variant, r.patch, f"{rep.pcc:.4f}", f"{rep.kc:.4f}", rep.oe, rep.fp, rep.fn])
    return buf.getvalue()


def variant_ordering(results: Sequence[RunResult]) -> list[tuple[str, float]]:
    """Variants by mean PCC over seeds, best first."""
    means = {}
    for variant in VARIANTS:
        pccs = [r.report.pcc for r in results if r.variant == variant]
        if pccs:
            means[variant] = float(np.mean(pccs))
    return sorted(means.items(), key=lambda kv: -kv[1])


def plateau_summary(results: Sequence[RunResult], tolerance: float = 0.5) -> str:
    """Describe PCC against patch size: rising steps, where it peaks, whether the tail stays near the peak."""
    rs = sorted(results, key=lambda r: r.patch)
    pcc = np.array([r.report.pcc for r in rs])
    patches = [r.patch for r in rs]
    rising = int(np.sum(np.diff(pcc) >= -tolerance))
    best = int(np.argmax(pcc))
    tail_ok = bool(np.all(pcc[best:] >= pcc[best] - tolerance)) if len(pcc) else True
    return (
        f"peak PCC {pcc[best]:.2f} at r={patches[best]}; "
        f"{rising}/{max(len(pcc) - 1, 0)} steps non-decreasing within {tolerance}; "
        f"plateau after peak: {'yes' if tail_ok else 'no'}"
    )
