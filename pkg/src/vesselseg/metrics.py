"""Segmentation evaluation: pixel confusion counts, overlap ratios, and
centerline Dice for vessel topology.

The foreground (vessel) is the positive class. Degenerate ratios with a
zero denominator resolve to 1.0 when the two masks agree on the absent
class and 0.0 otherwise; every such case is flagged in the report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imagecore import BinaryMask
from .postprocess import thin


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricReport:
    acc: float
    iou: float
    dsc: float
    precision: float
    sensitivity: float
    specificity: float
    fnr: float
    fpr: float
    cl_dice: float | None = None
    degenerate: list = field(default_factory=list)

    COLUMNS = ("acc", "iou", "dsc", "p", "sn", "sp", "fnr", "fpr", "cldice")

    def as_row(self) -> list:
        vals = [self.acc, self.iou, self.dsc, self.precision, self.sensitivity,
                self.specificity, self.fnr, self.fpr]
        out = [round(v * 100.0, 2) for v in vals]
        out.append(round(self.cl_dice * 100.0, 2) if self.cl_dice is not None else "")
        return out


def confusion(pred: BinaryMask, gt: BinaryMask) -> ConfusionCounts:
    if pred.data.shape != gt.data.shape:
        raise ValueError("mask dimension mismatch")
    p, g = pred.data, gt.data
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    tn = int(np.sum(~p & ~g))
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num: int, den: int, agree: bool, name: str, flags: list) -> float:
    if den > 0:
        return num / den
    flags.append(name)
    return 1.0 if agree else 0.0


def compute_metrics(c: ConfusionCounts) -> MetricReport:
    """All eight confusion ratios; centerline Dice is filled separately."""
    flags = []
    acc = _ratio(c.tp + c.tn, c.total, True, "acc", flags)
    iou = _ratio(c.tp, c.tp + c.fp + c.fn, True, "iou", flags)
    dsc = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, True, "dsc", flags)
    precision = _ratio(c.tp, c.tp + c.fp, c.fn == 0, "precision", flags)
    sensitivity = _ratio(c.tp, c.tp + c.fn, c.fp == 0, "sensitivity", flags)
    specificity = _ratio(c.tn, c.tn + c.fp, c.fn == 0, "specificity", flags)
    return MetricReport(acc, iou, dsc, precision, sensitivity, specificity,
                        fnr=1.0 - sensitivity, fpr=1.0 - specificity,
                        degenerate=flags)


def cl_dice(pred: BinaryMask, gt: BinaryMask) -> float:
    """Centerline Dice: harmonic mean of skeleton-in-mask precision and
    sensitivity. Rewards preserved vessel topology over bulk overlap."""
    if pred.data.shape != gt.data.shape:
        raise ValueError("mask dimension mismatch")
    skel_p = thin(pred).data
    skel_g = thin(gt).data
    flags = []
    tprec = _ratio(int((skel_p & gt.data).sum()), int(skel_p.sum()),
                   not gt.data.any(), "tprec", flags)
    tsens = _ratio(int((skel_g & pred.data).sum()), int(skel_g.sum()),
                   not pred.data.any(), "tsens", flags)
    if tprec + tsens == 0.0:
        return 0.0
    return 2.0 * tprec * tsens / (tprec + tsens)


def aggregate(counts: list[ConfusionCounts]) -> ConfusionCounts:
    """Pool counts fieldwise (micro-average across folds or images)."""
    if not counts:
        raise ValueError("nothing to aggregate")
    return ConfusionCounts(sum(c.tp for c in counts), sum(c.fp for c in counts),
                           sum(c.tn for c in counts), sum(c.fn for c in counts))


def pooled_cl_dice(pairs: list[tuple[BinaryMask, BinaryMask]]) -> float:
    """Micro-pooled centerline Dice over (pred, gt) pairs: skeleton hit
    counts are summed across the corpus before forming the ratios."""
    if not pairs:
        raise ValueError("nothing to pool")
    hit_p = tot_p = hit_g = tot_g = 0
    any_gt = any_pred = False
    for pred, gt in pairs:
        skel_p = thin(pred).data
        skel_g = thin(gt).data
        hit_p += int((skel_p & gt.data).sum())
        tot_p += int(skel_p.sum())
        hit_g += int((skel_g & pred.data).sum())
        tot_g += int(skel_g.sum())
        any_gt |= bool(gt.data.any())
        any_pred |= bool(pred.data.any())
    flags = []
    tprec = _ratio(hit_p, tot_p, not any_gt, "tprec", flags)
    tsens = _ratio(hit_g, tot_g, not any_pred, "tsens", flags)
    if tprec + tsens == 0.0:
        return 0.0
    return 2.0 * tprec * tsens / (tprec + tsens)


def write_metrics_csv(rows: list[tuple[str, MetricReport]], path) -> None:
    """One row per image plus pooled and macro rows, percentages with two
    decimals, fixed column order."""
    lines = ["id," + ",".join(MetricReport.COLUMNS)]
    for name, rep in rows:
        lines.append(name + "," + ",".join(str(v) for v in rep.as_row()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def macro_mean(reports: list[MetricReport]) -> MetricReport:
    """Plain per-image mean of each ratio (macro average)."""
    if not reports:
        raise ValueError("nothing to average")
    cds = [r.cl_dice for r in reports if r.cl_dice is not None]
    return MetricReport(
        acc=float(np.mean([r.acc for r in reports])),
        iou=float(np.mean([r.iou for r in reports])),
        dsc=float(np.mean([r.dsc for r in reports])),
        precision=float(np.mean([r.precision for r in reports])),
        sensitivity=float(np.mean([r.sensitivity for r in reports])),
        specificity=float(np.mean([r.specificity for r in reports])),
        fnr=float(np.mean([r.fnr for r in reports])),
        fpr=float(np.mean([r.fpr for r in reports])),
        cl_dice=float(np.mean(cds)) if cds else None,
    )
