"""Pixel Dice, per-wheal IoU, clinical area filter and accuracy curves."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

CLINICAL_AREA_MM2 = 15.9
TABLE_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


def default_iou_thresholds() -> list[float]:
    grid = {round(0.05 * i, 2) for i in range(21)}
    return sorted(grid | set(TABLE_THRESHOLDS))


@dataclass
class EvalConfig:
    iou_thresholds: list[float] = field(default_factory=default_iou_thresholds)
    area_threshold_mm2: float = CLINICAL_AREA_MM2
    binarize_threshold: float = 0.5

    def __post_init__(self):
        if any(not 0.0 <= t <= 1.0 for t in self.iou_thresholds):
            raise ValueError("IoU thresholds must lie in [0, 1]")
        if self.area_threshold_mm2 <= 0:
            raise ValueError("area threshold must be positive")


def confusion(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def dice_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2TP / (2TP + FP + FN); two empty masks score 1.0."""
    return dice_from_counts(*confusion(pred, gt))


def _as_pixel_set(region) -> set[tuple[int, int]]:
    if region is None:
        return set()
    if isinstance(region, set):
        return region
    arr = np.asarray(region)
    if arr.dtype == bool:
        return set(map(tuple, np.argwhere(arr).tolist()))
    return set(map(tuple, arr.reshape(-1, 2).tolist()))


def iou(pred_region, gt_region) -> float:
    """|A & B| / |A | B| over pixel sets.

    Accepts boolean masks, (N, 2) coordinate arrays, sets of (row, col) or
    ``None`` (no matched prediction).  Two empty regions score 0.0.
    """
    if isinstance(pred_region, np.ndarray) and isinstance(gt_region, np.ndarray) \
            and pred_region.dtype == bool and gt_region.dtype == bool:
        inter = np.count_nonzero(pred_region & gt_region)
        union = np.count_nonzero(pred_region | gt_region)
        return 0.0 if union == 0 else inter / union
    a, b = _as_pixel_set(pred_region), _as_pixel_set(gt_region)
    union = len(a | b)
    return 0.0 if union == 0 else len(a & b) / union


def clinical_filter(gt_areas_px: Sequence[float], mm_per_pixel: float | tuple[float, float] | None,
                    area_threshold_mm2: float = CLINICAL_AREA_MM2) -> list[int]:
    """Indices of ground-truth wheals whose area is at least the threshold.

    The default 15.9 mm^2 is the area of a 4.5 mm diameter circle
    (pi * 2.25^2 = 15.904).
    """
    if mm_per_pixel is None:
        raise ValueError("clinical filter needs a mm-per-pixel scale")
    px_area = float(np.prod(np.broadcast_to(np.asarray(mm_per_pixel, dtype=float), (2,))))
    return [i for i, a in enumerate(gt_areas_px) if a * px_area >= area_threshold_mm2]


def accuracy_curve(iou_values: Iterable[float], thresholds: Iterable[float]) -> list[tuple[float, float]] | None:
    """[(t, #{IoU > t} / N)] or ``None`` when there are no wheals to score."""
    vals = np.asarray(list(iou_values), dtype=float)
    if vals.size == 0:
        return None
    return [(float(t), float(np.count_nonzero(vals > t)) / vals.size) for t in thresholds]


def accuracy_at(curve: list[tuple[float, float]] | None, t: float) -> float | None:
    if curve is None:
        return None
    for tt, acc in curve:
        if math.isclose(tt, t, abs_tol=1e-9):
            return acc
    raise KeyError(f"threshold {t} not on the curve")


@dataclass
class CaseResult:
    case_id: str
    tp: int
    fp: int
    fn: int
    ious: list[float]          # clinically relevant wheals only, prick order
    pricks: list[int]
    gt_area_mm2: list[float]

    @property
    def dice(self) -> float:
        return dice_from_counts(self.tp, self.fp, self.fn)


@dataclass
class EvalReport:
    mode: str
    dice: float
    accuracy: list[tuple[float, float]] | None
    n_wheals: int
    n_gt_wheals: int
    cases: list[CaseResult]
    config: dict[str, Any]

    @property
    def ious(self) -> list[float]:
        return [v for c in self.cases for v in c.ious]

    def accuracy_at(self, t: float) -> float | None:
        return accuracy_at(self.accuracy, t)

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "dice": self.dice,
            "n_clinical_wheals": self.n_wheals,
            "n_gt_wheals": self.n_gt_wheals,
            "accuracy": None if self.accuracy is None else [{"t": t, "accuracy": a} for t, a in self.accuracy],
            "config": self.config,
            "cases": [{"case_id": c.case_id, "dice": c.dice, "tp": c.tp, "fp": c.fp, "fn": c.fn,
                       "pricks": c.pricks, "iou": c.ious, "gt_area_mm2": c.gt_area_mm2}
                      for c in self.cases],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "accuracy"])
        for t, a in self.accuracy or []:
            w.writerow([f"{t:.2f}", f"{a:.6f}"])
        return buf.getvalue()


def build_report(mode: str, cases: list[CaseResult], config: EvalConfig) -> EvalReport:
    tp = sum(c.tp for c in cases)
    fp = sum(c.fp for c in cases)
    fn = sum(c.fn for c in cases)
    ious = [v for c in cases for v in c.ious]
    cfg = {"iou_thresholds": list(config.iou_thresholds),
           "area_threshold_mm2": config.area_threshold_mm2,
           "binarize_threshold": config.binarize_threshold}
    return EvalReport(mode=mode, dice=dice_from_counts(tp, fp, fn),
                      accuracy=accuracy_curve(ious, config.iou_thresholds),
                      n_wheals=len(ious), n_gt_wheals=sum(len(c.gt_area_mm2) for c in cases),
                      cases=cases, config=cfg)


_LABELS = {"spat32": "32 images", "fullLight1": "1 full-light image"}


def table_report(*reports: EvalReport) -> str:
    """Plain-text comparison: Dice, then accuracy (%) at t_IoU 0.5 ... 0.9."""
    if not reports:
        raise ValueError("need at least one report")
    ids = [c.case_id for c in reports[0].cases]
    for r in reports[1:]:
        if [c.case_id for c in r.cases] != ids:
            raise ValueError("reports were computed on different case sets")
    head = ["", "Dice"] + [f"acc@{t:.1f}" for t in TABLE_THRESHOLDS]
    rows = [head]
    for r in reports:
        accs = []
        for t in TABLE_THRESHOLDS:
            a = r.accuracy_at(t)
            accs.append("n/a" if a is None else f"{100 * a:.1f}")
        rows.append([_LABELS.get(r.mode, r.mode), f"{r.dice:.3f}"] + accs)
    widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
    lines = ["  ".join(cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i])
                       for i, cell in enumerate(row)).rstrip() for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"
