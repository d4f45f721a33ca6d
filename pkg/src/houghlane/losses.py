"""Training losses: multi-scale BCE, Hough focal, RHT line, location, range."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import torch
import torch.nn.functional as F

EPS = 1e-7

TERMS = ("multi", "hough", "line", "loc", "range")


class LossPoisonedError(FloatingPointError):
    def __init__(self, term: str, value):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


@dataclass(frozen=True)
class LossWeights:
    lambda_m: float = 100.0
    lambda_h: float = 1000.0
    lambda_l: float = 100.0
    lambda_c: float = 100.0
    lambda_r: float = 10.0
    alpha: float = 2.0
    beta: float = 4.0
    positive_weight: float = 5.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite")
            if name.startswith("lambda") and v < 0:
                raise ValueError(f"{name} must be nonnegative")

    def weight(self, term: str) -> float:
        return {
            "multi": self.lambda_m, "hough": self.lambda_h, "line": self.lambda_l,
            "loc": self.lambda_c, "range": self.lambda_r,
        }[term]


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def multiscale_bce(pred, target) -> torch.Tensor:
    """Mean per-cell binary cross-entropy of a probability map."""
    pred, target = _t(pred), _t(target).to(_t(pred).dtype)
    _same_shape(pred, target, "multiscale_bce")
    p = pred.clamp(EPS, 1 - EPS)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


def rht_line_loss(pred_line_map, target_line_map) -> torch.Tensor:
    """BCE between the reverse-transformed line map and the rendered line target."""
    return multiscale_bce(pred_line_map, target_line_map)


def hough_focal(pred, target, lane_count: int, alpha: float = 2.0, beta: float = 4.0) -> torch.Tensor:
    """Penalty-reduced focal loss over a Hough map, normalized by lane count.

    Cells whose target is exactly 1 are positives; every other cell is a
    negative down-weighted by ``(1 - target) ** beta``. Zero-lane images
    contribute nothing.
    """
    pred = _t(pred)
    target = _t(getattr(target, "map", target)).to(pred.dtype)
    _same_shape(pred, target, "hough_focal")
    if lane_count <= 0:
        return pred.sum() * 0.0
    p = pred.clamp(EPS, 1 - EPS)
    pos = target == 1
    pos_term = (1 - p) ** alpha * torch.log(p)
    neg_term = (1 - target) ** beta * p ** alpha * torch.log(1 - p)
    return -torch.where(pos, pos_term, neg_term).sum() / lane_count


def location_loss(preds, targets, positive_weight: float = 1.0) -> torch.Tensor:
    """Positive-weighted BCE over all instance location maps stacked together."""
    preds, targets = _t(preds), _t(targets).to(_t(preds).dtype)
    _same_shape(preds, targets, "location_loss")
    p = preds.clamp(EPS, 1 - EPS)
    return -(positive_weight * targets * torch.log(p) + (1 - targets) * torch.log(1 - p)).mean()


def range_loss(row_logits, row_targets) -> torch.Tensor:
    """Softmax cross-entropy of per-row (absent, present) logits."""
    logits = _t(row_logits)
    targets = _t(row_targets).long()
    if logits.shape[:-1] != targets.shape or logits.shape[-1] != 2:
        raise ValueError(f"range_loss: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    return F.cross_entropy(logits.reshape(-1, 2), targets.reshape(-1))


def total_loss(terms: Mapping[str, torch.Tensor | float], weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Weighted sum of whichever terms are present; skipped terms are absent keys."""
    total = 0.0
    for name, value in terms.items():
        if name not in TERMS:
            raise KeyError(f"unknown loss term {name!r}")
        v = _t(value)
        if not torch.isfinite(v).all():
            raise LossPoisonedError(name, float(v.detach()))
        total = total + weights.weight(name) * v
    return _t(total)


def breakdown(terms: Mapping[str, torch.Tensor | float], weights: LossWeights = LossWeights()) -> dict:
    """Plain-float record of each term and the weighted total, for JSON logs."""
    out = {name: float(_t(v).detach()) for name, v in terms.items()}
    out["total"] = float(total_loss(terms, weights).detach())
    return out
