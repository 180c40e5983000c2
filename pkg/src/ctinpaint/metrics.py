"""Masked-region MAE and PSNR, aggregated the way the comparison tables are."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["mae_masked", "psnr", "psnr_masked", "MetricReport", "evaluate_set",
           "write_report_csv", "format_table"]


def _masked(pred, label, m):
    pred, label, m = (np.asarray(a, dtype=np.float64) for a in (pred, label, m))
    if not pred.shape == label.shape == m.shape:
        raise ValueError(f"shape mismatch: {pred.shape}, {label.shape}, {m.shape}")
    hole = m == 0
    if not hole.any():
        raise ValueError("mask has no masked (zero) pixels")
    return pred[hole], label[hole]


def mae_masked(pred, label, m) -> float:
    """Mean ``|pred - label|`` over pixels where ``m == 0``."""
    p, l = _masked(pred, label, m)
    return float(np.mean(np.abs(p - l)))


def _psnr_from_mse(mse: float, peak: float) -> float:
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def psnr(pred, label, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` over all pixels; ``inf`` for identical images."""
    if not peak > 0:
        raise ValueError("peak must be positive")
    pred, label = np.asarray(pred, dtype=np.float64), np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: {pred.shape}, {label.shape}")
    return _psnr_from_mse(float(np.mean((pred - label) ** 2)), peak)


def psnr_masked(pred, label, m, peak: float = 1.0) -> float:
    p, l = _masked(pred, label, m)
    return _psnr_from_mse(float(np.mean((p - l) ** 2)), peak)


@dataclass
class MetricReport:
    mae: list[float] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    psnr_masked: list[float] = field(default_factory=list)
    n_pixels_masked: list[int] = field(default_factory=list)
    names: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.mae)

    @staticmethod
    def _mean(values) -> float:
        return float(np.mean(values))

    @property
    def mean_mae(self) -> float:
        return self._mean(self.mae)

    @property
    def mean_psnr(self) -> float:
        return self._mean(self.psnr)

    @property
    def mean_psnr_masked(self) -> float:
        return self._mean(self.psnr_masked)

    def rows(self):
        for i in range(len(self)):
            yield {
                "name": self.names[i],
                "mae": self.mae[i],
                "psnr": self.psnr[i],
                "psnr_masked": self.psnr_masked[i],
                "n_pixels_masked": self.n_pixels_masked[i],
            }


def evaluate_set(pairs, peak: float = 1.0, names=None) -> MetricReport:
    """Per-image metrics and unweighted means over ``(pred, label, mask)`` triples."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate_set needs at least one (pred, label, mask) triple")
    report = MetricReport()
    for i, (pred, label, m) in enumerate(pairs):
        report.mae.append(mae_masked(pred, label, m))
        report.psnr.append(psnr(pred, label, peak))
        report.psnr_masked.append(psnr_masked(pred, label, m, peak))
        report.n_pixels_masked.append(int(np.sum(np.asarray(m) == 0)))
        report.names.append(names[i] if names is not None else str(i))
    return report


def write_report_csv(path, reports: dict[tuple[str, str], MetricReport]) -> Path:
    """One row per image keyed by (method, family), plus a ``MEAN`` row per group."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "family", "name", "mae", "psnr", "psnr_masked", "n_pixels_masked"])
    for (method, family), rep in sorted(reports.items()):
        for row in rep.rows():
            writer.writerow([method, family, row["name"], f"{row['mae']:.10g}", f"{row['psnr']:.10g}",
                             f"{row['psnr_masked']:.10g}", row["n_pixels_masked"]])
        writer.writerow([method, family, "MEAN", f"{rep.mean_mae:.10g}", f"{rep.mean_psnr:.10g}",
                         f"{rep.mean_psnr_masked:.10g}", sum(rep.n_pixels_masked)])
    path.write_text(buf.getvalue())
    return path


FAMILY_LABELS = {
    "metal": "Metal mask",
    "circle": "Circle",
    "hrect": "Horizontal rectangle",
    "vrect": "Vertical rectangle",
}


def format_table(reports: dict[tuple[str, str], MetricReport]) -> str:
    """Text table: one row per mask family, MAE/PSNR column pair per method."""
    methods = sorted({m for m, _ in reports})
    families = [f for f in FAMILY_LABELS if any(f == fam for _, fam in reports)]
    families += sorted({fam for _, fam in reports} - set(families))
    width = 22
    head = f"{'':<{width}}" + "".join(f"| {m:^17}" for m in methods)
    sub = f"{'Metric':<{width}}" + "".join(f"| {'MAE':>7} {'PSNR':>8} " for _ in methods)
    lines = [head, sub, "-" * len(sub)]
    for fam in families:
        cells = []
        for m in methods:
            rep = reports.get((m, fam))
            cells.append(f"| {rep.mean_mae:7.4f} {rep.mean_psnr:8.2f} " if rep else f"| {'-':>7} {'-':>8} ")
        lines.append(f"{FAMILY_LABELS.get(fam, fam):<{width}}" + "".join(cells))
    return "\n".join(lines) + "\n"
