"""Confusion-matrix metrics: mIoU, Dice, multilabel F1, split reports."""

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .datasets import IGNORE, BinaryMask
from .errors import DataError, RangeError, ShapeError, UndefinedMetricError


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Pixel counts; rows are ground truth, columns prediction."""

    counts: np.ndarray

    @classmethod
    def empty(cls, k):
        return cls(np.zeros((k, k), dtype=np.int64))

    @property
    def k(self):
        return self.counts.shape[0]

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def iou_per_class(self):
        """IoU per class, NaN where the class is absent from both pred and gt."""
        c = self.counts.astype(np.float64)
        tp = np.diag(c)
        denom = c.sum(0) + c.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / denom, np.nan)


def accumulate(cm, pred, gt, ignore_index=IGNORE):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    g = np.ascontiguousarray(gt.ravel(), dtype=np.int64)
    p = np.ascontiguousarray(pred.ravel(), dtype=np.int64)
    keep = g != ignore_index
    for name, arr in (("gt", g[keep]), ("pred", p[keep])):
        if arr.size and (arr.min() < 0 or arr.max() >= cm.k):
            raise RangeError(f"{name} label outside [0, {cm.k}) on a non-ignore pixel")
    return cm + ConfusionMatrix(kernels.confusion(g, p, cm.k, ignore_index))


def miou(cm):
    iou = cm.iou_per_class()
    if np.all(np.isnan(iou)):
        raise UndefinedMetricError("no class has support in either prediction or ground truth")
    return float(np.nanmean(iou))


def dice(pred, gt):
    """Dice of two binary masks; 1.0 when both are empty."""
    p = pred.data if isinstance(pred, BinaryMask) else np.asarray(pred)
    g = gt.data if isinstance(gt, BinaryMask) else np.asarray(gt)
    if p.shape != g.shape:
        raise ShapeError(f"pred {p.shape} vs gt {g.shape}")
    p, g = p != 0, g != 0
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / ((tp + fp) + (tp + fn))


def multilabel_f1(probabilities, labels, threshold=0.5):
    """Micro-averaged F1 over all (sample, class) pairs."""
    probs = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels) != 0
    if probs.shape != y.shape:
        raise ShapeError(f"probabilities {probs.shape} vs labels {y.shape}")
    pred = probs >= threshold
    tp = np.count_nonzero(pred & y)
    fp = np.count_nonzero(pred & ~y)
    fn = np.count_nonzero(~pred & y)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return float(2 * precision * recall / (precision + recall))


@dataclass
class EvalReport:
    mode: str
    miou: float
    miou_all: float
    miou_positive_only: float | None
    foreground_iou: float | None
    dice_mean: float
    per_class_iou: list
    n_images: int

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _foreground_dice(pred, gt, ignore_index):
    keep = gt != ignore_index
    return dice((pred != 0) & keep, (gt != 0) & keep)


def _pooled(ids, preds, gts, k, ignore_index):
    cm = ConfusionMatrix.empty(k)
    for i in ids:
        cm = accumulate(cm, preds[i], gts[i], ignore_index)
    return cm


def evaluate_split(preds, gts, mode="all", num_classes=2, ignore_index=IGNORE):
    """Score id-aligned label grids.

    mIoU comes from one pooled confusion matrix; Dice is averaged per image
    on the foreground (any non-background label). ``positive_only`` keeps
    images whose ground truth has at least one foreground pixel.
    """
    if mode not in ("all", "positive_only"):
        raise ValueError(f"unknown mode {mode!r}")
    if set(preds) != set(gts):
        raise DataError(f"prediction/ground-truth ids differ: {sorted(set(preds) ^ set(gts))[:5]}")
    ids = sorted(gts)
    gts = {i: np.asarray(gts[i]) for i in ids}
    preds = {i: np.asarray(preds[i]) for i in ids}
    positive = [i for i in ids if np.any((gts[i] != 0) & (gts[i] != ignore_index))]
    selected = positive if mode == "positive_only" else ids
    if not selected:
        raise UndefinedMetricError(f"no images selected for mode {mode!r}")

    cm_all = _pooled(ids, preds, gts, num_classes, ignore_index)
    cm_pos = _pooled(positive, preds, gts, num_classes, ignore_index) if positive else None
    cm_sel = cm_pos if mode == "positive_only" else cm_all
    iou = cm_sel.iou_per_class()
    fg = cm_sel.counts.copy()
    fg_cm = ConfusionMatrix(np.array([[fg[0, 0], fg[0, 1:].sum()], [fg[1:, 0].sum(), fg[1:, 1:].sum()]]))
    fg_iou = fg_cm.iou_per_class()[1]
    return EvalReport(
        mode=mode,
        miou=miou(cm_sel),
        miou_all=miou(cm_all),
        miou_positive_only=miou(cm_pos) if cm_pos is not None else None,
        foreground_iou=None if np.isnan(fg_iou) else float(fg_iou),
        dice_mean=float(np.mean([_foreground_dice(preds[i], gts[i], ignore_index) for i in selected])),
        per_class_iou=[None if np.isnan(v) else float(v) for v in iou],
        n_images=len(selected),
    )


def render_table(rows):
    """Text table with pos./all columns per split.

    ``rows`` maps a method name to ``{split: {"pos": report, "all": report}}``.
    """
    splits = sorted({s for cols in rows.values() for s in cols})
    head = ["Method"] + [f"mIoU {s} {m}" for s in splits for m in ("pos.", "all")]
    body = []
    for name, cols in rows.items():
        line = [name]
        for s in splits:
            for m in ("pos", "all"):
                rep = cols.get(s, {}).get(m)
                line.append("-" if rep is None else f"{rep.miou:.4f}")
        body.append(line)
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    fmt = lambda r: " | ".join(c.ljust(w) for c, w in zip(r, widths))  # noqa: E731
    return "\n".join([fmt(head), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in body]) + "\n"
