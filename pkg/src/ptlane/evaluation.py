"""Lane benchmark metrics: point accuracy, lane FP/FN, mIOU, distance-binned curves.

Ground-truth entries equal to ``-2`` are absent points and never counted.
A predicted point is correct when ``|x_pred - x_gt| < threshold``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingGeometry, RowMismatch, ShapeMismatch
from .scenedata import ABSENT, TuSimpleRecord

DEFAULT_THRESHOLD = 20.0
DEFAULT_LANE_MATCH = 0.85


@dataclass
class ImageCounts:
    correct: int                  # C_im
    total: int                    # S_im
    n_pred: int
    n_gt: int
    false_pred: int               # F_pred
    missed: int                   # M_pred
    # per gt point: (row, correct?) for binning
    points: list = field(default_factory=list, repr=False)


@dataclass
class EvalCounts:
    images: list

    @property
    def F_pred(self):
        return sum(c.false_pred for c in self.images)

    @property
    def N_pred(self):
        return sum(c.n_pred for c in self.images)

    @property
    def M_pred(self):
        return sum(c.missed for c in self.images)

    @property
    def N_gt(self):
        return sum(c.n_gt for c in self.images)


def _lanes_of(obj):
    return obj.lanes if isinstance(obj, TuSimpleRecord) else obj


def _rows_of(obj, fallback):
    return obj.h_samples if isinstance(obj, TuSimpleRecord) else fallback


def _match_image(pred_lanes, gt_lanes, threshold):
    """Greedy one-to-one matching by descending correct-point count.

    Ties go to the gt lane with the lower index, then to the prediction with
    the smaller summed error and lexicographically smaller x-list, so the
    result does not depend on the order predictions are listed in.
    """
    n_rows = len(gt_lanes[0]) if gt_lanes else (len(pred_lanes[0]) if pred_lanes else 0)
    gt = np.array(gt_lanes, dtype=np.float64).reshape(len(gt_lanes), n_rows)
    pred = np.array(pred_lanes, dtype=np.float64).reshape(len(pred_lanes), -1) \
        if pred_lanes else np.zeros((0, n_rows))
    valid_gt = gt != ABSENT
    if len(gt_lanes) and len(pred_lanes) and pred.shape[1] != gt.shape[1]:
        raise RowMismatch(f"prediction has {pred.shape[1]} rows, ground truth {gt.shape[1]}")
    hits = np.zeros((len(gt_lanes), len(pred_lanes), n_rows), dtype=bool)
    err = np.zeros((len(gt_lanes), len(pred_lanes)))
    for g in range(len(gt_lanes)):
        for p in range(len(pred_lanes)):
            ok = valid_gt[g] & (pred[p] != ABSENT)
            diff = np.abs(pred[p] - gt[g])
            hits[g, p] = ok & (diff < threshold)
            err[g, p] = np.where(hits[g, p], diff, threshold).sum()
    counts = hits.sum(axis=2)
    free_g = set(range(len(gt_lanes)))
    free_p = set(range(len(pred_lanes)))
    matches = {}
    while free_g and free_p:
        best = None
        for g in sorted(free_g):
            for p in free_p:
                key = (-counts[g, p], g, err[g, p], tuple(pred[p]))
                if best is None or key < best[0]:
                    best = (key, g, p)
        _, g, p = best
        if counts[g, p] == 0:
            break
        matches[g] = p
        free_g.discard(g)
        free_p.discard(p)
    return matches, hits, valid_gt


def evaluate_image(pred_lanes, gt_lanes, h_samples, threshold=DEFAULT_THRESHOLD,
                   lane_match_ratio=DEFAULT_LANE_MATCH) -> ImageCounts:
    for lane in gt_lanes:
        if len(lane) != len(h_samples):
            raise RowMismatch(f"gt lane has {len(lane)} entries for {len(h_samples)} rows")
    for lane in pred_lanes:
        if len(lane) != len(h_samples):
            raise RowMismatch(f"predicted lane has {len(lane)} entries for {len(h_samples)} rows")
    # lanes without any valid point are not ground truth
    gt_lanes = [l for l in gt_lanes if any(x != ABSENT for x in l)]
    matches, hits, valid_gt = _match_image(pred_lanes, gt_lanes, threshold)
    total = int(valid_gt.sum())
    correct = 0
    points = []
    good_pred = set()
    missed = 0
    for g in range(len(gt_lanes)):
        p = matches.get(g)
        row_hit = hits[g, p] if p is not None else np.zeros(len(h_samples), dtype=bool)
        n_valid = int(valid_gt[g].sum())
        n_hit = int(row_hit.sum())
        correct += n_hit
        for r in np.flatnonzero(valid_gt[g]):
            points.append((h_samples[r], bool(row_hit[r])))
        if p is not None and n_hit / n_valid >= lane_match_ratio:
            good_pred.add(p)
        else:
            missed += 1
    return ImageCounts(
        correct=correct, total=total, n_pred=len(pred_lanes), n_gt=len(gt_lanes),
        false_pred=len(pred_lanes) - len(good_pred), missed=missed, points=points,
    )


def evaluate(preds, gts, threshold=DEFAULT_THRESHOLD,
             lane_match_ratio=DEFAULT_LANE_MATCH) -> EvalCounts:
    """Per-image counts; images with no valid ground-truth point are skipped."""
    if len(preds) != len(gts):
        raise RowMismatch(f"{len(preds)} predictions for {len(gts)} ground-truth images")
    images = []
    for pred, gt in zip(preds, gts):
        h_samples = gt.h_samples if isinstance(gt, TuSimpleRecord) else pred.h_samples
        if isinstance(pred, TuSimpleRecord) and list(pred.h_samples) != list(h_samples):
            raise RowMismatch(f"h_samples differ for {gt.raw_file if hasattr(gt, 'raw_file') else '?'}")
        counts = evaluate_image(_lanes_of(pred), _lanes_of(gt), h_samples, threshold,
                                lane_match_ratio)
        if counts.total > 0:
            images.append(counts)
    return EvalCounts(images)


def tusimple_accuracy(preds, gts, threshold=DEFAULT_THRESHOLD):
    """Mean over images of correct / ground-truth points; returns ``(accuracy, EvalCounts)``."""
    counts = evaluate(preds, gts, threshold)
    if not counts.images:
        return 0.0, counts
    acc = sum(c.correct / c.total for c in counts.images) / len(counts.images)
    return acc, counts


def _ratio(num, den):
    return num / den if den else 0.0


def tusimple_fp_fn(preds, gts, threshold=DEFAULT_THRESHOLD,
                   lane_match_ratio=DEFAULT_LANE_MATCH):
    counts = evaluate(preds, gts, threshold, lane_match_ratio)
    return _ratio(counts.F_pred, counts.N_pred), _ratio(counts.M_pred, counts.N_gt)


def confusion_counts(pred, gt, classes, ignore_index=255):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    keep = gt != ignore_index
    p, g = pred[keep], gt[keep]
    inter = np.array([np.sum((p == c) & (g == c)) for c in classes])
    union = np.array([np.sum((p == c) | (g == c)) for c in classes])
    return inter, union


def miou(pred, gt, classes, ignore_index=255):
    """Per-class IOU (``nan`` for classes absent from both) and their mean."""
    inter, union = confusion_counts(pred, gt, classes, ignore_index)
    return _iou_from_counts(classes, inter, union)


def _iou_from_counts(classes, inter, union):
    per_class = {}
    for c, i, u in zip(classes, inter, union):
        per_class[c] = float(i / u) if u > 0 else float("nan")
    present = [v for v in per_class.values() if not math.isnan(v)]
    return per_class, (float(np.mean(present)) if present else float("nan"))


# ----------------------------------------------------------------- horizon filter


def under_horizon_filter(items, horizon_row, ignore_index=255):
    """Drop ground truth above ``horizon_row``.

    TuSimple records get ``-2`` at rows above the horizon; masks get
    ``ignore_index`` there.  Returns new objects.
    """
    if isinstance(items, np.ndarray):
        out = items.copy()
        rows = np.arange(out.shape[-2])
        out[..., rows < horizon_row, :] = ignore_index
        return out
    if isinstance(items, TuSimpleRecord):
        keep = [h >= horizon_row for h in items.h_samples]
        lanes = [[x if k else ABSENT for x, k in zip(lane, keep)] for lane in items.lanes]
        return TuSimpleRecord(lanes, list(items.h_samples), items.raw_file, dict(items.extra))
    return [under_horizon_filter(i, horizon_row, ignore_index) for i in items]


# ------------------------------------------------------------------ distance bins


@dataclass
class CameraGeometry:
    """Pitched pinhole camera over flat ground, enough to turn rows into metres."""

    f: float
    cy: float
    height: float
    pitch: float

    def row_to_range(self, rows) -> np.ndarray:
        b = (np.asarray(rows, dtype=np.float64) - self.cy) / self.f
        denom = math.cos(self.pitch) * b + math.sin(self.pitch)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = self.height / denom * (math.cos(self.pitch) - math.sin(self.pitch) * b)
        return np.where(denom > 0, z, np.inf)


@dataclass
class DistanceBins:
    edges: list
    metric: list
    support: list
    unit: str = "px"

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError("bin edges must be strictly increasing")

    def rows(self):
        for lo, hi, m, s in zip(self.edges, self.edges[1:], self.metric, self.support):
            yield lo, hi, m, s

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "metric", "support"])
            for lo, hi, m, s in self.rows():
                w.writerow([lo, hi, m, s])


def default_edges(unit: str, image_height: int) -> list:
    if unit == "px":
        return list(range(0, image_height, 32)) + [image_height]
    return [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, math.inf]


def _distance(rows, unit, image_height, geometry):
    rows = np.asarray(rows, dtype=np.float64)
    if unit == "px":
        return (image_height - 1) - rows
    if unit == "m":
        if geometry is None:
            raise MissingGeometry("metre bins need camera geometry")
        return geometry.row_to_range(rows)
    raise ValueError(f"unknown bin unit {unit!r}")


def bin_index(distances, edges) -> np.ndarray:
    """Bin of each distance; ``lo <= d < hi`` except that the last bin is closed.

    Distances outside the edges get -1.
    """
    d = np.asarray(distances, dtype=np.float64)
    idx = np.searchsorted(edges, d, side="right") - 1
    last = len(edges) - 2
    idx = np.where((d == edges[-1]), last, idx)
    return np.where((idx < 0) | (idx > last), -1, idx)


def distance_binned_accuracy(counts: EvalCounts, edges, unit="px", image_height=None,
                             geometry=None) -> DistanceBins:
    """Point accuracy per distance bin from per-image evaluation counts."""
    rows = np.array([r for c in counts.images for r, _ in c.points], dtype=np.float64)
    ok = np.array([h for c in counts.images for _, h in c.points], dtype=bool)
    idx = bin_index(_distance(rows, unit, image_height, geometry), edges)
    metric, support = [], []
    for b in range(len(edges) - 1):
        sel = idx == b
        n = int(sel.sum())
        support.append(n)
        metric.append(float(ok[sel].mean()) if n else float("nan"))
    return DistanceBins(list(edges), metric, support, unit)


def distance_binned_miou(preds, gts, classes, edges, unit="px", geometry=None,
                         ignore_index=255) -> DistanceBins:
    """mIOU per distance bin over ground-truth pixels; each bin pools all images."""
    n_bins = len(edges) - 1
    inter = np.zeros((n_bins, len(classes)))
    union = np.zeros((n_bins, len(classes)))
    support = np.zeros(n_bins, dtype=np.int64)
    for pred, gt in zip(preds, gts):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeMismatch(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        H = gt.shape[0]
        row_bin = bin_index(_distance(np.arange(H), unit, H, geometry), edges)
        for b in range(n_bins):
            rows = row_bin == b
            if not rows.any():
                continue
            i, u = confusion_counts(pred[rows], gt[rows], classes, ignore_index)
            inter[b] += i
            union[b] += u
            support[b] += int(np.sum(gt[rows] != ignore_index))
    metric = [_iou_from_counts(classes, inter[b], union[b])[1] for b in range(n_bins)]
    return DistanceBins(list(edges), metric, [int(s) for s in support], unit)


def distance_binned(kind, preds, gts, edges=None, unit="px", geometry=None, image_height=None,
                    classes=None, threshold=DEFAULT_THRESHOLD, ignore_index=255) -> DistanceBins:
    """Dispatch on ``kind``: ``"accuracy"`` (lane records) or ``"miou"`` (masks)."""
    if unit == "m" and geometry is None:
        raise MissingGeometry("metre bins need camera geometry")
    if kind == "accuracy":
        counts = evaluate(preds, gts, threshold)
        if image_height is None:
            raise ValueError("pixel distances need image_height")
        edges = edges or default_edges(unit, image_height)
        return distance_binned_accuracy(counts, edges, unit, image_height, geometry)
    if kind == "miou":
        if classes is None:
            raise ValueError("mIOU binning needs the class list")
        edges = edges or default_edges(unit, np.asarray(gts[0]).shape[0])
        return distance_binned_miou(preds, gts, classes, edges, unit, geometry, ignore_index)
    raise ValueError(f"unknown metric kind {kind!r}")


def lanes_from_instances(instance, h_samples, min_pixels: int = 1, band: int = 0) -> list:
    """TuSimple-style x-lists from an instance map: mean column per instance per row."""
    instance = np.asarray(instance)
    lanes = []
    for lab in np.unique(instance):
        if lab == 0:
            continue
        m = instance == lab
        if m.sum() < min_pixels:
            continue
        xs = []
        for r in h_samples:
            lo, hi = max(r - band, 0), min(r + band + 1, instance.shape[0])
            cols = np.nonzero(m[lo:hi])[1]
            xs.append(int(round(cols.mean())) if cols.size else ABSENT)
        if any(x != ABSENT for x in xs):
            lanes.append(xs)
    return lanes
