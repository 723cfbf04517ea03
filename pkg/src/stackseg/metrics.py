"""IoU, accuracy, relaxed precision/recall and the precision-recall breakeven point."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import maximum_filter

BREAKEVEN_MAX_THRESHOLDS = 256


class NoBreakevenError(ValueError):
    """The score map cannot produce a precision/recall curve."""


def _binary_pair(gt, pred) -> tuple[np.ndarray, np.ndarray]:
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    return gt.astype(bool), pred.astype(bool)


def confusion_counts(gt, pred) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) pixel counts."""
    g, p = _binary_pair(gt, pred)
    tp = int(np.count_nonzero(g & p))
    fp = int(np.count_nonzero(~g & p))
    fn = int(np.count_nonzero(g & ~p))
    return tp, fp, fn, g.size - tp - fp - fn


def _iou_from_counts(tp: int, fp: int, fn: int) -> float:
    union = tp + fp + fn
    return 1.0 if union == 0 else tp / union


def iou(gt, pred) -> float:
    tp, fp, fn, _ = confusion_counts(gt, pred)
    return _iou_from_counts(tp, fp, fn)


def accuracy(gt, pred) -> float:
    tp, fp, fn, tn = confusion_counts(gt, pred)
    return (tp + tn) / (tp + fp + fn + tn)


def dilate(mask: np.ndarray, rho: int) -> np.ndarray:
    """Binary dilation by a (2*rho+1)-wide square (Chebyshev radius rho)."""
    if rho == 0:
        return mask.astype(bool)
    return maximum_filter(mask.astype(np.uint8), size=2 * rho + 1, mode="constant", cval=0).astype(bool)


def relaxed_counts(gt, pred, rho: int = 3) -> tuple[int, int, int, int]:
    """(pred hits, |pred|, gt hits, |gt|) where a hit has a counterpart within rho."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    g, p = _binary_pair(gt, pred)
    return (
        int(np.count_nonzero(p & dilate(g, rho))),
        int(np.count_nonzero(p)),
        int(np.count_nonzero(g & dilate(p, rho))),
        int(np.count_nonzero(g)),
    )


def _ratio(hits: int, total: int) -> float:
    return 1.0 if total == 0 else hits / total


def relaxed_precision_recall(gt, pred, rho: int = 3) -> tuple[float, float]:
    """Precision/recall where a positive counts if the other mask has a positive
    within Chebyshev distance ``rho`` (rho=3 is the 7x7 window).

    Empty prediction gives precision 1, empty ground truth gives recall 1.
    """
    ph, pn, rh, rn = relaxed_counts(gt, pred, rho)
    return _ratio(ph, pn), _ratio(rh, rn)


def breakeven_thresholds(scores: np.ndarray) -> np.ndarray:
    uniq = np.unique(scores)
    if uniq.size > BREAKEVEN_MAX_THRESHOLDS:
        q = np.linspace(0.0, 1.0, BREAKEVEN_MAX_THRESHOLDS)
        uniq = np.unique(np.quantile(uniq, q, method="nearest"))
    return uniq


def precision_recall_curve(gt, scores, rho: int = 3, thresholds=None):
    """Relaxed (precision, recall) for ``pred = scores >= t`` at each threshold."""
    gt = np.asarray(gt).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    if gt.shape != scores.shape:
        raise ValueError(f"shapes differ: {gt.shape} vs {scores.shape}")
    if thresholds is None:
        thresholds = breakeven_thresholds(scores)
    gt_dil = dilate(gt, rho)
    n_gt = int(gt.sum())
    prec = np.empty(len(thresholds))
    rec = np.empty(len(thresholds))
    for i, t in enumerate(thresholds):
        pred = scores >= t
        prec[i] = _ratio(int(np.count_nonzero(pred & gt_dil)), int(np.count_nonzero(pred)))
        rec[i] = _ratio(int(np.count_nonzero(gt & dilate(pred, rho))), n_gt)
    return np.asarray(thresholds), prec, rec


def breakeven_from_curve(prec: np.ndarray, rec: np.ndarray) -> float:
    """Value where precision meets recall, thresholds taken in ascending order.

    The first sign change of precision - recall is interpolated linearly; an
    exact zero returns that point. Without a crossing, the mean of precision
    and recall at the threshold minimising their gap is returned.
    """
    d = prec - rec
    for i in range(len(d)):
        if d[i] == 0:
            return float(prec[i])
        if i + 1 < len(d) and d[i] * d[i + 1] < 0:
            a = d[i] / (d[i] - d[i + 1])
            return float(prec[i] + a * (prec[i + 1] - prec[i]))
    k = int(np.argmin(np.abs(d)))
    return float((prec[k] + rec[k]) / 2)


def breakeven_point(gt, scores, rho: int = 3) -> float:
    gt = np.asarray(gt).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size and (scores.min() < 0 or scores.max() > 1):
        raise ValueError("scores must lie in [0, 1]")
    if not gt.any() and np.unique(scores).size <= 1:
        raise NoBreakevenError("constant score map without positive ground truth has no breakeven point")
    _, prec, rec = precision_recall_curve(gt, scores, rho)
    return breakeven_from_curve(prec, rec)


def pooled_breakeven(gts: list, score_maps: list, rho: int = 3) -> float:
    """Breakeven over the pooled pixels of several images (shared thresholds)."""
    if not gts:
        raise ValueError("need at least one image")
    all_scores = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in score_maps])
    if not any(np.asarray(g).any() for g in gts) and np.unique(all_scores).size <= 1:
        raise NoBreakevenError("constant score maps without positive ground truth have no breakeven point")
    thresholds = breakeven_thresholds(all_scores)
    ph = np.zeros(len(thresholds))
    pn = np.zeros(len(thresholds))
    rh = np.zeros(len(thresholds))
    rn = 0
    for gt, s in zip(gts, score_maps):
        g = np.asarray(gt).astype(bool)
        s = np.asarray(s, dtype=np.float64)
        g_dil = dilate(g, rho)
        rn += int(g.sum())
        for i, t in enumerate(thresholds):
            pred = s >= t
            ph[i] += np.count_nonzero(pred & g_dil)
            pn[i] += np.count_nonzero(pred)
            rh[i] += np.count_nonzero(g & dilate(pred, rho))
    prec = np.where(pn > 0, ph / np.maximum(pn, 1), 1.0)
    rec = rh / rn if rn else np.ones(len(thresholds))
    return breakeven_from_curve(prec, rec)


@dataclass
class MetricsReport:
    region: str
    tp: int
    fp: int
    fn: int
    tn: int
    relaxed_precision: float
    relaxed_recall: float
    breakeven: float | None = None
    # raw relaxed counts so that aggregation can pool them
    rp_hits: int = 0
    rp_total: int = 0
    rr_hits: int = 0
    rr_total: int = 0

    @property
    def iou(self) -> float:
        return _iou_from_counts(self.tp, self.fp, self.fn)

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.pixels

    @property
    def pixels(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def as_row(self) -> dict:
        return {
            "region": self.region,
            "iou": self.iou,
            "accuracy": self.accuracy,
            "relaxed_precision": self.relaxed_precision,
            "relaxed_recall": self.relaxed_recall,
            "breakeven": self.breakeven,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
        }

    def to_line(self) -> str:
        """One ``key=value`` record per line."""
        parts = []
        for k, v in self.as_row().items():
            if isinstance(v, float):
                v = f"{v:.6f}"
            parts.append(f"{k}={'' if v is None else v}")
        return " ".join(parts)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(gt, pred, region: str = "", rho: int = 3, scores=None) -> MetricsReport:
    tp, fp, fn, tn = confusion_counts(gt, pred)
    ph, pn, rh, rn = relaxed_counts(gt, pred, rho)
    be = breakeven_point(gt, scores, rho) if scores is not None else None
    return MetricsReport(region, tp, fp, fn, tn, _ratio(ph, pn), _ratio(rh, rn), be, ph, pn, rh, rn)


def aggregate(reports: list[MetricsReport], region: str = "Overall") -> MetricsReport:
    """Pool pixel counts over reports; ratios are recomputed, never averaged.

    The breakeven of an aggregate is the mean of the per-report values when
    all of them have one (use :func:`pooled_breakeven` for the pooled form).
    """
    if not reports:
        raise ValueError("cannot aggregate an empty list of reports")
    if len(reports) == 1:
        r = reports[0]
        return MetricsReport(region, **{k: v for k, v in r.to_dict().items() if k != "region"})
    tot = {k: sum(getattr(r, k) for r in reports) for k in ("tp", "fp", "fn", "tn", "rp_hits", "rp_total", "rr_hits", "rr_total")}
    bes = [r.breakeven for r in reports]
    be = float(np.mean(bes)) if all(b is not None for b in bes) else None
    return MetricsReport(
        region,
        tot["tp"], tot["fp"], tot["fn"], tot["tn"],
        _ratio(tot["rp_hits"], tot["rp_total"]),
        _ratio(tot["rr_hits"], tot["rr_total"]),
        be,
        tot["rp_hits"], tot["rp_total"], tot["rr_hits"], tot["rr_total"],
    )


TABLE_COLUMNS = ("region", "iou", "accuracy", "relaxed_precision", "relaxed_recall", "breakeven", "tp", "fp", "fn", "tn")


def format_table(reports: list[MetricsReport], delimiter: str = "\t") -> str:
    """Machine-readable table, one row per region followed by the given order."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, delimiter=delimiter, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        row = r.as_row()
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else ("" if v is None else v)) for k, v in row.items()})
    return buf.getvalue()


def format_wide_table(reports: list[MetricsReport]) -> str:
    """Regions as columns and metrics as rows, the way result tables are printed."""
    header = ["metric"] + [r.region for r in reports]
    lines = ["\t".join(header)]
    for metric in ("iou", "accuracy"):
        lines.append("\t".join([metric] + [f"{100 * getattr(r, metric):.2f}" for r in reports]))
    if all(r.breakeven is not None for r in reports):
        lines.append("\t".join(["breakeven"] + [f"{r.breakeven:.4f}" for r in reports]))
    return "\n".join(lines) + "\n"
