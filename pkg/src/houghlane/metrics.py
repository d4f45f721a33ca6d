"""TuSimple point accuracy and CULane IoU F1."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .datasets import ABSENT, CULANE_SIZE, TuSimpleRecord, sample_lane
from .geometry import LanePolyline, LaneSet


@dataclass(frozen=True)
class EvalResult:
    """Additive evaluation counts. ``n_correct`` / ``n_gt`` are lane points."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    n_correct: int = 0
    n_gt: int = 0

    def __add__(self, other: "EvalResult") -> "EvalResult":
        return EvalResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                          self.n_correct + other.n_correct, self.n_gt + other.n_gt)

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_gt if self.n_gt else 0.0

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "n_correct": self.n_correct,
                "n_gt": self.n_gt, "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


def merge(results: Iterable[EvalResult]) -> EvalResult:
    total = EvalResult()
    for r in results:
        total = total + r
    return total


def tusimple_accuracy(pred: LaneSet | Iterable[LanePolyline], gt: TuSimpleRecord,
                      px_threshold: float = 20.0) -> EvalResult:
    """Correct-point count over ground-truth points after greedy lane matching.

    Predicted lanes are sampled at the record's ``h_samples``. Pairs are
    matched one-to-one in order of increasing mean |dx| over rows where both
    lanes are present; a matched point is correct when |dx| < ``px_threshold``.
    """
    gts = [np.asarray(x, dtype=np.float64) for x in gt.lanes]
    gts = [g for g in gts if np.any(g != ABSENT)]
    preds = [np.asarray(sample_lane(ln, gt.h_samples), dtype=np.float64) for ln in pred]
    n_gt = int(sum(np.count_nonzero(g != ABSENT) for g in gts))
    pairs = []
    for i, g in enumerate(gts):
        for j, p in enumerate(preds):
            both = (g != ABSENT) & (p != ABSENT)
            if both.any():
                pairs.append((float(np.abs(g[both] - p[both]).mean()), i, j))
    pairs.sort()
    used_g, used_p, correct = set(), set(), 0
    for _, i, j in pairs:
        if i in used_g or j in used_p:
            continue
        used_g.add(i)
        used_p.add(j)
        g, p = gts[i], preds[j]
        both = (g != ABSENT) & (p != ABSENT)
        correct += int(np.count_nonzero(np.abs(g[both] - p[both]) < px_threshold))
    return EvalResult(n_correct=correct, n_gt=n_gt)


def scaled_stroke_width(image_size: tuple[int, int], base: float = 30.0) -> float:
    """CULane's 30 px stroke at 1640 px width, scaled with the image width."""
    return base * image_size[0] / CULANE_SIZE[0]


def lane_mask(lane: LanePolyline, image_size: tuple[int, int], width: float) -> np.ndarray:
    """Pixels whose centre is within ``width / 2`` of the lane polyline."""
    w, h = image_size
    half = width / 2.0
    mask = np.zeros((h, w), dtype=bool)
    pts = lane.points
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        lo_x, hi_x = int(max(math.floor(min(x0, x1) - half), 0)), int(min(math.ceil(max(x0, x1) + half), w - 1))
        lo_y, hi_y = int(max(math.floor(min(y0, y1) - half), 0)), int(min(math.ceil(max(y0, y1) + half), h - 1))
        if lo_x > hi_x or lo_y > hi_y:
            continue
        yy, xx = np.mgrid[lo_y:hi_y + 1, lo_x:hi_x + 1].astype(np.float64)
        dx, dy = x1 - x0, y1 - y0
        L2 = dx * dx + dy * dy
        t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / L2, 0.0, 1.0) if L2 > 0 else 0.0
        d2 = (xx - x0 - t * dx) ** 2 + (yy - y0 - t * dy) ** 2
        mask[lo_y:hi_y + 1, lo_x:hi_x + 1] |= d2 <= half * half
    return mask


def iou_matrix(pred: Sequence[LanePolyline], gt: Sequence[LanePolyline], image_size, width) -> np.ndarray:
    pm = [lane_mask(p, image_size, width).ravel() for p in pred]
    gm = [lane_mask(g, image_size, width).ravel() for g in gt]
    out = np.zeros((len(pm), len(gm)))
    for i, a in enumerate(pm):
        for j, b in enumerate(gm):
            union = np.count_nonzero(a | b)
            out[i, j] = np.count_nonzero(a & b) / union if union else 0.0
    return out


def culane_f1(pred: LaneSet | Sequence[LanePolyline], gt: LaneSet | Sequence[LanePolyline],
              iou_threshold: float = 0.5, stroke_width: float | None = None,
              image_size: tuple[int, int] = CULANE_SIZE) -> EvalResult:
    """Lane-level TP/FP/FN from an optimal IoU assignment of stroke masks."""
    pred, gt = list(pred), list(gt)
    width = scaled_stroke_width(image_size) if stroke_width is None else stroke_width
    tp = 0
    if pred and gt:
        ious = iou_matrix(pred, gt, image_size, width)
        rows, cols = linear_sum_assignment(-ious)
        tp = int(np.count_nonzero(ious[rows, cols] > iou_threshold))
    return EvalResult(tp=tp, fp=len(pred) - tp, fn=len(gt) - tp)


CULANE_CATEGORIES = ("normal", "crowded", "dazzle", "shadow", "noline", "arrow", "curve", "cross", "night")

_CATEGORY_ALIASES = {
    "normal": "normal", "test0_normal": "normal",
    "crowded": "crowded", "crowd": "crowded", "test1_crowd": "crowded",
    "dazzle": "dazzle", "hlight": "dazzle", "test2_hlight": "dazzle",
    "shadow": "shadow", "test3_shadow": "shadow",
    "noline": "noline", "no line": "noline", "no_line": "noline", "test4_noline": "noline",
    "arrow": "arrow", "test5_arrow": "arrow",
    "curve": "curve", "test6_curve": "curve",
    "cross": "cross", "test7_cross": "cross",
    "night": "night", "test8_night": "night",
}


def canonical_category(tag: str) -> str:
    try:
        return _CATEGORY_ALIASES[tag.strip().lower()]
    except KeyError:
        raise KeyError(f"unknown CULane category {tag!r}") from None


def category_report(results: Mapping[str, EvalResult | Iterable[EvalResult]]) -> dict[str, float]:
    """Per-category F1; the cross category reports its false-positive count."""
    totals: dict[str, EvalResult] = {}
    for tag, res in results.items():
        cat = canonical_category(tag)
        r = res if isinstance(res, EvalResult) else merge(res)
        totals[cat] = totals.get(cat, EvalResult()) + r
    report = {}
    for cat in CULANE_CATEGORIES:
        if cat in totals:
            report[cat] = totals[cat].fp if cat == "cross" else totals[cat].f1
    return report


def format_report(report: Mapping[str, float]) -> str:
    names = list(report)
    head = " ".join(f"{n:>8}" for n in names)
    vals = " ".join(f"{int(report[n]):>8d}" if n == "cross" else f"{100 * report[n]:>8.2f}" for n in names)
    return head + "\n" + vals
