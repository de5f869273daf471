"""Change-map accuracy: confusion counts, PCC and Cohen's kappa.

Changed pixels (1) are the positive class.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

REPORT_KEYS = ("fp", "fn", "tp", "tn", "oe", "pcc", "kc")


@dataclass(frozen=True)
class MetricsReport:
    fp: int
    fn: int
    tp: int
    tn: int
    oe: int
    pcc: float = float("nan")
    kc: float = float("nan")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def to_text(self) -> str:
        return "".join(f"{k}={getattr(self, k)}\n" for k in REPORT_KEYS)

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in REPORT_KEYS}, indent=2) + "\n"

    def write(self, path: str | Path) -> tuple[Path, Path]:
        """Write ``path`` as key=value text and ``path.json`` alongside it."""
        path = Path(path)
        json_path = path.with_name(path.name + ".json")
        path.write_text(self.to_text())
        json_path.write_text(self.to_json())
        return path, json_path

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        fields = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        counts = {k: int(fields[k]) for k in ("fp", "fn", "tp", "tn", "oe")}
        return cls(**counts, pcc=float(fields["pcc"]), kc=float(fields["kc"]))


def _binary(name: str, arr) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    return arr.astype(bool)


def confusion(pred, gt) -> MetricsReport:
    """Counts only; ``pcc``/``kc`` are filled in by ``evaluate``."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    p, g = _binary("prediction", pred), _binary("ground truth", gt)
    tp = int(np.count_nonzero(p & g))
    tn = int(np.count_nonzero(~p & ~g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return MetricsReport(fp=fp, fn=fn, tp=tp, tn=tn, oe=fp + fn)


def pcc_kappa(report: MetricsReport) -> tuple[float, float]:
    """Percentage correct classification and kappa, both in percent."""
    n = report.total
    if n == 0:
        raise ValueError("no pixels to score")
    tp, tn, fp, fn = report.tp, report.tn, report.fp, report.fn
    po = (tp + tn) / n
    pe = ((tp + fp) * (tp + fn) + (tn + fn) * (tn + fp)) / (n * n)
    pcc = 100.0 * po
    if pe == 1.0:
        # one class everywhere in both maps: agreement is either total or nil
        return pcc, 100.0 if report.oe == 0 else 0.0
    return pcc, 100.0 * (po - pe) / (1.0 - pe)


def evaluate(pred, gt) -> MetricsReport:
    counts = confusion(pred, gt)
    pcc, kc = pcc_kappa(counts)
    return MetricsReport(**{**asdict(counts), "pcc": pcc, "kc": kc})
