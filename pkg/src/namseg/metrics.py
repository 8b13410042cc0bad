"""Detection and segmentation metrics over predicted vs truth masks.

Rates: TPR over positive slices, FPR over negative slices, FPR_nodule
for wrong-location detections on positive slices. Overlap: Dice over
all positive slices, plus TP Dice / TP DOA restricted to truly detected
nodules, with a size-stratified breakdown.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .model import NODULE

# a prediction truly detects a truth mask when they overlap and the
# predicted centroid falls inside the truth bbox dilated by this margin
DETECTION_BBOX_MARGIN = 2

DEFAULT_SIZE_BIN_EDGES = (0.0, 8.0, 12.0, 16.0, math.inf)


def dice(a, b) -> float:
    """2|a&b| / (|a|+|b|); two empty masks score 1, one empty scores 0.

    Accepts boolean masks (same shape) or pixel-coordinate sets.
    """
    if not isinstance(a, (set, frozenset)) and not isinstance(b, (set, frozenset)):
        am = np.asarray(a, dtype=bool)
        bm = np.asarray(b, dtype=bool)
        na, nb = int(am.sum()), int(bm.sum())
        if na == 0 and nb == 0:
            return 1.0
        if na == 0 or nb == 0:
            return 0.0
        return 2.0 * int((am & bm).sum()) / (na + nb)
    sa = _as_pixel_set(a)
    sb = _as_pixel_set(b)
    if not sa and not sb:
        return 1.0
    if not sa or not sb:
        return 0.0
    return 2.0 * len(sa & sb) / (len(sa) + len(sb))


def _as_pixel_set(m) -> frozenset:
    if isinstance(m, (set, frozenset)):
        return frozenset(m)
    arr = np.asarray(m, dtype=bool)
    ys, xs = np.nonzero(arr)
    return frozenset(zip(xs.tolist(), ys.tolist()))


def _centroid(mask: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(mask)
    return float(ys.mean()), float(xs.mean())


def _truly_detects(pred: np.ndarray, truth: np.ndarray,
                   margin: int = DETECTION_BBOX_MARGIN) -> bool:
    if not pred.any() or not truth.any():
        return False
    if not (pred & truth).any():
        return False
    cy, cx = _centroid(pred)
    ys, xs = np.nonzero(truth)
    return (ys.min() - margin <= cy <= ys.max() + margin
            and xs.min() - margin <= cx <= xs.max() + margin)


@dataclass
class SliceOutcome:
    slice_id: str
    label: int
    n_pred: int
    n_truth: int
    detected_pairs: list[tuple[np.ndarray, np.ndarray]]  # (pred, truth)
    has_false_detection: bool
    dice_all: float      # union-vs-union Dice, positives only


def detection_outcomes(pred_masks: dict, truth_masks: dict, labels: dict,
                       margin: int = DETECTION_BBOX_MARGIN) -> list[SliceOutcome]:
    """Per-slice tallies; ids of the three dicts must coincide.

    pred_masks/truth_masks map slice id -> list of masks (possibly empty),
    labels maps id -> class. Each truth is matched by at most one
    prediction (greedy, best Dice first).
    """
    ids = sorted(labels)
    if sorted(pred_masks) != ids or sorted(truth_masks) != ids:
        raise DataError("slice id sets disagree between predictions, truth, and labels")

    outcomes = []
    for sid in ids:
        preds = [np.asarray(m, dtype=bool) for m in pred_masks[sid]]
        truths = [np.asarray(m, dtype=bool) for m in truth_masks[sid]]
        label = labels[sid]

        pairs = []
        matched_p: set[int] = set()
        matched_t: set[int] = set()
        scored = sorted(
            ((dice(p, t), pi, ti) for pi, p in enumerate(preds)
             for ti, t in enumerate(truths) if _truly_detects(p, t, margin)),
            key=lambda s: (-s[0], s[1], s[2]))
        for _, pi, ti in scored:
            if pi in matched_p or ti in matched_t:
                continue
            matched_p.add(pi)
            matched_t.add(ti)
            pairs.append((preds[pi], truths[ti]))

        false_det = any(pi not in matched_p for pi in range(len(preds)))
        if label == NODULE:
            union_p = _union(preds, truths)
            union_t = _union(truths, preds)
            d_all = dice(union_p, union_t)
        else:
            d_all = float("nan")
        outcomes.append(SliceOutcome(slice_id=sid, label=label, n_pred=len(preds),
                                     n_truth=len(truths), detected_pairs=pairs,
                                     has_false_detection=false_det, dice_all=d_all))
    return outcomes


def _union(masks, fallback):
    if masks:
        out = masks[0].copy()
        for m in masks[1:]:
            out |= m
        return out
    ref = fallback[0] if fallback else np.zeros((1, 1), bool)
    return np.zeros_like(ref)


@dataclass
class MetricsReport:
    tpr: float
    fpr: float
    fpr_nodule: float
    dice_mean: float
    dice_sd: float
    tp_dice_mean: float
    tp_dice_sd: float
    tp_doa_mean: float
    tp_doa_sd: float
    n_pos: int
    n_neg: int
    n_detected: int
    size_bins: list[dict] = field(default_factory=list)

    CSV_COLUMNS = ("tpr", "fpr", "fpr_nodule", "dice_mean", "dice_sd",
                   "tp_dice_mean", "tp_dice_sd", "tp_doa_mean", "tp_doa_sd",
                   "n_pos", "n_neg", "n_detected")

    def csv_row(self) -> str:
        return ",".join(repr(getattr(self, c)) if isinstance(getattr(self, c), float)
                        else str(getattr(self, c)) for c in self.CSV_COLUMNS)


def _mean_sd(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    # single observation reports sd 0 by convention
    return float(arr.mean()), float(arr.std(ddof=0))


def equivalent_diameter(mask: np.ndarray) -> float:
    return 2.0 * math.sqrt(int(np.asarray(mask, bool).sum()) / math.pi)


def report(outcomes: list[SliceOutcome], px_to_mm2: float = 1.0,
           size_bin_edges=DEFAULT_SIZE_BIN_EDGES) -> MetricsReport:
    """Aggregate rates, overlap statistics, and the size-stratified table."""
    if not outcomes:
        raise DataError("no outcomes to aggregate")
    pos = [o for o in outcomes if o.label == NODULE]
    neg = [o for o in outcomes if o.label != NODULE]

    tpr = sum(1 for o in pos if o.detected_pairs) / len(pos) if pos else float("nan")
    fpr = sum(1 for o in neg if o.n_pred > 0) / len(neg) if neg else float("nan")
    fpr_nodule = (sum(1 for o in pos if o.has_false_detection) / len(pos)
                  if pos else float("nan"))

    dice_mean, dice_sd = _mean_sd([o.dice_all for o in pos])
    tp_records = []
    for o in pos:
        for pred, truth in o.detected_pairs:
            tp_records.append({
                "dice": dice(pred, truth),
                "doa": abs(int(pred.sum()) - int(truth.sum())) * px_to_mm2,
                "diameter": equivalent_diameter(truth),
            })
    tp_dice_mean, tp_dice_sd = _mean_sd([r["dice"] for r in tp_records])
    tp_doa_mean, tp_doa_sd = _mean_sd([r["doa"] for r in tp_records])

    bins = []
    for lo, hi in zip(size_bin_edges[:-1], size_bin_edges[1:]):
        rows = [r for r in tp_records if lo <= r["diameter"] < hi]
        bd_mean, bd_sd = _mean_sd([r["dice"] for r in rows])
        ba_mean, ba_sd = _mean_sd([r["doa"] for r in rows])
        bins.append({"lo": lo, "hi": hi, "n": len(rows),
                     "tp_dice_mean": bd_mean, "tp_dice_sd": bd_sd,
                     "tp_doa_mean": ba_mean, "tp_doa_sd": ba_sd})

    return MetricsReport(
        tpr=tpr, fpr=fpr, fpr_nodule=fpr_nodule,
        dice_mean=dice_mean, dice_sd=dice_sd,
        tp_dice_mean=tp_dice_mean, tp_dice_sd=tp_dice_sd,
        tp_doa_mean=tp_doa_mean, tp_doa_sd=tp_doa_sd,
        n_pos=len(pos), n_neg=len(neg), n_detected=len(tp_records),
        size_bins=bins)


def two_nodule_tally(outcomes: list[SliceOutcome]) -> tuple[int, int, int]:
    """(both detected, exactly one detected, none detected) over 2-truth slices."""
    both = one = none = 0
    for o in outcomes:
        if o.n_truth != 2:
            continue
        hits = len(o.detected_pairs)
        if hits >= 2:
            both += 1
        elif hits == 1:
            one += 1
        else:
            none += 1
    return both, one, none


def write_metrics_csv(path, rows: list[tuple[str, MetricsReport]]):
    lines = ["config," + ",".join(MetricsReport.CSV_COLUMNS)]
    for name, rep in rows:
        lines.append(f"{name},{rep.csv_row()}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def write_size_bins_csv(path, rep: MetricsReport):
    lines = ["bin_lo,bin_hi,n,tp_dice_mean,tp_dice_sd,tp_doa_mean,tp_doa_sd"]
    for b in rep.size_bins:
        lines.append(",".join(repr(float(b[k])) if isinstance(b[k], float) else str(b[k])
                              for k in ("lo", "hi", "n", "tp_dice_mean", "tp_dice_sd",
                                        "tp_doa_mean", "tp_doa_sd")))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
