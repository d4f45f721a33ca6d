"""Lane instance selection and per-instance decoding.

Peaks of the Hough map become instances; each instance's Hough feature vector
is turned into the weights of a single dynamic convolution that picks that lane
out of the shared spatial features. A shared decoder then produces a location
map whose rows are decoded into x positions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from numpy.lib.stride_tricks import sliding_window_view
from torch import nn

from .geometry import HoughPoint, LanePolyline, LaneSet, round_half_down

NMS_THRESHOLDS = {"tusimple": 0.1, "culane": 0.15, "llamas": 0.15}
NO_LANE = -2.0


@dataclass
class PeakSet:
    points: list[HoughPoint]
    kernel: int = 5
    threshold: float = 0.0

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def cells(self) -> list[tuple[int, int]]:
        return [p.cell for p in self.points]


def nms_select(hough_map: np.ndarray, kernel: int = 5, threshold: float = 0.1) -> PeakSet:
    """Stride-1 max-pool NMS followed by a score threshold.

    A cell survives when nothing in its ``kernel x kernel`` window is larger
    and no equal cell in the window has a lower flat index.
    """
    hm = np.asarray(hough_map, dtype=np.float64)
    if hm.ndim != 2:
        raise ValueError(f"hough map must be 2-D, got {hm.shape}")
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError("kernel must be a positive odd integer")
    pad = kernel // 2
    vals = np.pad(hm, pad, constant_values=-np.inf)
    idx = np.pad(np.arange(hm.size).reshape(hm.shape), pad, constant_values=np.iinfo(np.int64).max)
    win_v = sliding_window_view(vals, (kernel, kernel))
    win_i = sliding_window_view(idx, (kernel, kernel))
    v = hm[..., None, None]
    i = np.arange(hm.size).reshape(hm.shape)[..., None, None]
    beaten = ((win_v > v) | ((win_v == v) & (win_i < i))).any(axis=(-1, -2))
    keep = ~beaten & (hm >= threshold)
    ts, rs = np.nonzero(keep)
    scores = hm[ts, rs]
    order = np.lexsort((ts * hm.shape[1] + rs, -scores))
    pts = [HoughPoint(int(ts[k]), int(rs[k]), float(np.clip(scores[k], 0.0, 1.0))) for k in order]
    return PeakSet(pts, kernel, threshold)


def peak_to_feature_cell(cell: tuple[int, int], factor: int, feature_shape: tuple[int, int]) -> tuple[int, int]:
    """Map a decoded-map cell onto the coarser feature grid: divide, round, clamp."""
    t = int(round_half_down(cell[0] / factor))
    r = int(round_half_down(cell[1] / factor))
    return (min(max(t, 0), feature_shape[0] - 1), min(max(r, 0), feature_shape[1] - 1))


def gather_hough_features(hough_feat, peaks: PeakSet | Sequence[HoughPoint], factor: int = 3):
    """One channel vector per peak, read at the peak's cell on the feature grid.

    Works on a ``(C, Theta_f, R_f)`` tensor (differentiable) or array.
    """
    pts = list(peaks)
    shape = tuple(hough_feat.shape[-2:])
    cells = [peak_to_feature_cell(p.cell, factor, shape) for p in pts]
    if isinstance(hough_feat, torch.Tensor):
        if not cells:
            return hough_feat.new_zeros((0, hough_feat.shape[0]))
        t = torch.tensor([c[0] for c in cells])
        r = torch.tensor([c[1] for c in cells])
        return hough_feat[:, t, r].T
    arr = np.asarray(hough_feat)
    if not cells:
        return np.zeros((0, arr.shape[0]), dtype=arr.dtype)
    return np.stack([arr[:, t, r] for t, r in cells])


@dataclass
class DynamicKernel:
    weight: torch.Tensor  # (out, in, k, k)
    bias: torch.Tensor  # (out,)


class KernelRegressor(nn.Module):
    """MLP mapping an instance's Hough vector to one conv layer's parameters."""

    def __init__(self, in_dim: int, in_channels: int, out_channels: int, kernel_size: int = 3,
                 hidden: Sequence[int] = (64,)):
        super().__init__()
        self.in_dim = in_dim
        self.in_channels, self.out_channels, self.kernel_size = in_channels, out_channels, kernel_size
        n_out = out_channels * in_channels * kernel_size ** 2 + out_channels
        dims = [in_dim, *hidden, n_out]
        layers: list[nn.Module] = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.ReLU()]
        self.mlp = nn.Sequential(*layers[:-1])

    @property
    def n_params(self) -> int:
        return self.out_channels * self.in_channels * self.kernel_size ** 2 + self.out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"instance vector width {x.shape[-1]} != regressor input {self.in_dim}")
        return self.mlp(x)

    def split(self, params: torch.Tensor) -> list[DynamicKernel]:
        n_w = self.out_channels * self.in_channels * self.kernel_size ** 2
        shape = (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)
        return [DynamicKernel(p[:n_w].reshape(shape), p[n_w:]) for p in params]


def regress_kernels(instance_features, regressor: KernelRegressor) -> list[DynamicKernel]:
    x = torch.as_tensor(instance_features)
    if x.shape[0] == 0:
        return []
    return regressor.split(regressor(x))


def dynamic_conv(features: torch.Tensor, kernels: Sequence[DynamicKernel]) -> torch.Tensor:
    """Apply each instance kernel to the shared ``(C, h, w)`` map; same padding."""
    if not kernels:
        return features.new_zeros((0, 0, *features.shape[-2:]))
    c = features.shape[0]
    for k in kernels:
        if k.weight.shape[1] != c:
            raise ValueError(f"kernel expects {k.weight.shape[1]} channels, features have {c}")
    weight = torch.cat([k.weight for k in kernels])
    bias = torch.cat([k.bias for k in kernels])
    n, out = len(kernels), kernels[0].weight.shape[0]
    x = features.unsqueeze(0).expand(n, -1, -1, -1).reshape(1, n * c, *features.shape[-2:])
    y = F.conv2d(x, weight, bias, padding=kernels[0].weight.shape[-1] // 2, groups=n)
    return y.reshape(n, out, *features.shape[-2:])


@dataclass
class LocationMap:
    map: np.ndarray  # (H, W) pre-sigmoid logits
    row_logits: np.ndarray  # (H, 2): absent / present


class LaneDecoder(nn.Module):
    """Shared decoder: small conv stack, upsample to the output grid, row head."""

    def __init__(self, channels: int, out_size: tuple[int, int]):
        super().__init__()
        self.out_size = tuple(out_size)  # (H, W)
        self.conv = nn.Sequential(
            nn.ReLU(), nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(channels, 1, 1),
        )
        self.row_head = nn.Linear(self.out_size[1], 2)

    def forward(self, inst: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``(N, C, h, w)`` instance features -> logits ``(N, H, W)``, rows ``(N, H, 2)``."""
        logits = self.conv(inst)
        if tuple(logits.shape[-2:]) != self.out_size:
            logits = F.interpolate(logits, size=self.out_size, mode="bilinear", align_corners=False)
        logits = logits[:, 0]
        rows = self.row_head(torch.sigmoid(logits))
        return logits, rows


def dynamic_conv_apply(features: torch.Tensor, kernels: Sequence[DynamicKernel],
                       decoder: LaneDecoder) -> tuple[torch.Tensor, torch.Tensor]:
    inst = dynamic_conv(features, kernels)
    if inst.shape[0] == 0:
        h, w = decoder.out_size
        return features.new_zeros((0, h, w)), features.new_zeros((0, h, 2))
    return decoder(inst)


def to_location_maps(logits: torch.Tensor, rows: torch.Tensor) -> list[LocationMap]:
    lg, rw = logits.detach().cpu().numpy(), rows.detach().cpu().numpy()
    return [LocationMap(a, b) for a, b in zip(lg, rw)]


def row_positions(loc: LocationMap, presence_threshold: float = 0.5, mode: str = "expectation") -> np.ndarray:
    """x per row from the location map; ``NO_LANE`` where the row is inactive."""
    logits = np.asarray(loc.map, dtype=np.float64)
    rows = np.asarray(loc.row_logits, dtype=np.float64)
    presence = 1.0 / (1.0 + np.exp(-(rows[:, 1] - rows[:, 0])))
    if mode == "expectation":
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        xs = p @ np.arange(logits.shape[1], dtype=np.float64)
    elif mode == "argmax":
        xs = logits.argmax(axis=1).astype(np.float64)
    else:
        raise ValueError(f"unknown decode mode {mode!r}")
    return np.where(presence >= presence_threshold, xs, NO_LANE)


def decode_rows(loc: LocationMap, presence_threshold: float = 0.5, mode: str = "expectation",
                scale: tuple[float, float] = (1.0, 1.0), id=0) -> LanePolyline | None:
    """Polyline over the active rows, or ``None`` when fewer than two rows are active.

    ``scale`` maps location-map pixels to image pixels (pixel centres aligned).
    """
    xs = row_positions(loc, presence_threshold, mode)
    ys = np.nonzero(xs != NO_LANE)[0]
    if len(ys) < 2:
        return None
    sx, sy = scale
    px = (xs[ys] + 0.5) * sx - 0.5
    py = (ys + 0.5) * sy - 0.5
    return LanePolyline.from_xy(px, py, id)


def lanes_from_location_maps(maps: Sequence[LocationMap], presence_threshold: float = 0.5,
                             mode: str = "expectation", scale=(1.0, 1.0)) -> LaneSet:
    lanes = []
    for i, loc in enumerate(maps):
        ln = decode_rows(loc, presence_threshold, mode, scale, id=i)
        if ln is not None:
            lanes.append(ln)
    return LaneSet(lanes)


def lanes_from_peaks(hough_map: np.ndarray, hough_feat: torch.Tensor, features: torch.Tensor,
                     regressor: KernelRegressor, decoder: LaneDecoder, threshold: float = 0.1,
                     kernel: int = 5, factor: int = 3, presence_threshold: float = 0.5,
                     mode: str = "expectation", scale=(1.0, 1.0)) -> LaneSet:
    """NMS, gather, regress, convolve, decode. One lane per surviving peak at most."""
    peaks = nms_select(hough_map, kernel, threshold)
    if not len(peaks):
        return LaneSet([])
    with torch.no_grad():
        vecs = gather_hough_features(hough_feat, peaks, factor)
        kernels = regress_kernels(vecs, regressor)
        logits, rows = dynamic_conv_apply(features, kernels, decoder)
    return lanes_from_location_maps(to_location_maps(logits, rows), presence_threshold, mode, scale)
