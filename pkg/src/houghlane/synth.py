"""Synthetic road scenes with labeled lanes, reproducible from a seed."""
from __future__ import annotations

import math
import queue
import threading
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .geometry import (DegenerateLaneError, HoughRangeError, HoughSpec, LanePolyline, LaneSet,
                       lane_to_hough_point)

MIN_VISIBLE_ROWS = 20
MIN_PEAK_GAP = 3
MIN_TILT = math.radians(12.0)  # keeps lanes off the theta = 0 / pi seam


@dataclass
class SyntheticScene:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    lanes: LaneSet
    visible_rows: list[int]
    seed: int | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape


def polyline_distance(points: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Distance from every pixel centre of an ``(H, W)`` grid to a polyline."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    best = np.full((h, w), np.inf)
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        dx, dy = x1 - x0, y1 - y0
        L2 = dx * dx + dy * dy
        t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / L2, 0.0, 1.0) if L2 > 0 else 0.0
        np.minimum(best, np.hypot(xx - x0 - t * dx, yy - y0 - t * dy), out=best)
    return best


def lane_mask(lanes, shape: tuple[int, int], thickness: float, scale: float = 1.0) -> np.ndarray:
    """Binary mask of lanes on a grid ``scale`` times coarser than the image."""
    out = np.zeros(shape, dtype=np.float32)
    for ln in lanes:
        pts = (ln.points + 0.5) / scale - 0.5
        out[polyline_distance(pts, shape) <= thickness / 2.0] = 1.0
    return out


def _lane_points(rng, width, height, vp, difficulty):
    """One lane heading toward the vanishing point, clipped to the image."""
    y_bot = height - 1.0
    y_top = vp[1] + rng.uniform(0.04, 0.18) * height
    span = vp[1] - y_bot
    x_bot = rng.uniform(-0.7 * width, 1.7 * width)
    # reject near-vertical lanes
    if abs(x_bot - vp[0]) < math.tan(MIN_TILT) * abs(span):
        return None
    ys = np.arange(math.ceil(y_top), height, dtype=np.float64)
    t = (y_bot - ys) / (y_bot - y_top)
    xs = x_bot + (vp[0] - x_bot) * (ys - y_bot) / span
    bend = rng.uniform(-1.0, 1.0) * difficulty * 0.08 * width
    xs = xs + bend * t ** 2
    keep = (xs >= 0) & (xs <= width - 1)
    if keep.sum() < MIN_VISIBLE_ROWS + 8:
        return None
    idx = np.nonzero(keep)[0]
    # the visible part must be one contiguous run
    if np.any(np.diff(idx) != 1):
        return None
    return np.column_stack([xs[idx], ys[idx]])


def generate_scene(rng: np.random.Generator, difficulty: float = 0.0, width: int = 128, height: int = 80,
                   max_lanes: int = 5, min_lanes: int = 1, spec: HoughSpec | None = None,
                   seed: int | None = None) -> SyntheticScene:
    """Render 1-5 lanes as anti-aliased strokes with noise, distractors and occluders.

    ``difficulty`` in [0, 1] scales curvature, dashing, occlusion and clutter;
    at 0 lanes are straight, solid and unoccluded. Lanes are kept at least
    ``MIN_PEAK_GAP`` bins apart on ``spec`` (the label grid).
    """
    difficulty = float(np.clip(difficulty, 0.0, 1.0))
    if spec is None:
        spec = HoughSpec.for_grid(width, height, 72, 72)
    n_target = int(rng.integers(min_lanes, max_lanes + 1))
    vp = (width / 2 + rng.uniform(-0.15, 0.15) * width, rng.uniform(0.15, 0.3) * height)
    lanes, peaks = [], []
    for _ in range(200):
        if len(lanes) == n_target:
            break
        pts = _lane_points(rng, width, height, vp, difficulty)
        if pts is None:
            continue
        lane = LanePolyline(pts, id=len(lanes))
        try:
            pk = lane_to_hough_point(lane, spec)
        except (HoughRangeError, DegenerateLaneError):
            continue
        if any(max(abs(pk.theta_idx - q.theta_idx), abs(pk.r_idx - q.r_idx)) < MIN_PEAK_GAP for q in peaks):
            continue
        if any(_too_close(lane, other) for other in lanes):
            continue
        lanes.append(lane)
        peaks.append(pk)

    yy = np.arange(height, dtype=np.float64)[:, None]
    img = rng.uniform(0.1, 0.35) + rng.uniform(-0.08, 0.08) * (yy / height - 0.5)
    img = np.broadcast_to(img, (height, width)).copy()

    visible = []
    occluders = _occluders(rng, width, height, difficulty)
    for lane in lanes:
        stroke = _render_lane(rng, lane, (height, width), difficulty)
        for x0, y0, x1, y1, _ in occluders:
            stroke[y0:y1, x0:x1] = 0.0
        rows = np.count_nonzero(stroke.max(axis=1) > 0.5)
        visible.append(int(rows))
        img = np.maximum(img, stroke * rng.uniform(0.6, 1.0))
    for x0, y0, x1, y1, v in occluders:
        img[y0:y1, x0:x1] = v

    _distractors(rng, img, difficulty)
    img += rng.normal(0.0, 0.02 + 0.05 * difficulty, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    # occlusion can leave a lane with too few visible rows; drop it from both
    keep = [i for i, v in enumerate(visible) if v >= MIN_VISIBLE_ROWS]
    if len(keep) < len(lanes):
        return generate_scene(rng, difficulty, width, height, max_lanes, min_lanes, spec, seed)
    return SyntheticScene(img, LaneSet(lanes), visible, seed)


def _too_close(a: LanePolyline, b: LanePolyline, gap: float = 4.0) -> bool:
    lo, hi = max(a.ys[0], b.ys[0]), min(a.ys[-1], b.ys[-1])
    if hi < lo:
        return False
    ys = np.arange(math.ceil(lo), math.floor(hi) + 1)
    if len(ys) == 0:
        return False
    d = a.x_at(ys) - b.x_at(ys)
    return bool(np.nanmin(np.abs(d)) < gap or np.nanmin(d) * np.nanmax(d) < 0)


def _render_lane(rng, lane: LanePolyline, shape, difficulty) -> np.ndarray:
    h, w = shape
    dist = polyline_distance(lane.points, shape)
    yy = np.arange(h, dtype=np.float64)[:, None] * np.ones((1, w))
    y0, y1 = lane.y_range
    depth = np.clip((yy - y0) / max(y1 - y0, 1.0), 0.0, 1.0)
    half = (rng.uniform(0.6, 1.1) * (0.55 + 0.45 * depth))
    cov = np.clip(half + 0.5 - dist, 0.0, 1.0)
    if rng.random() < 0.6 * difficulty:
        period = rng.uniform(10, 16)
        phase = rng.uniform(0, period)
        on = ((yy + phase) % period) < 0.65 * period
        cov = cov * on
    return cov


def _occluders(rng, width, height, difficulty):
    out = []
    for _ in range(int(rng.poisson(1.5 * difficulty))):
        bw, bh = int(rng.uniform(0.08, 0.2) * width), int(rng.uniform(0.08, 0.18) * height)
        x0 = int(rng.integers(0, max(1, width - bw)))
        y0 = int(rng.integers(int(0.3 * height), max(int(0.3 * height) + 1, height - bh)))
        out.append((x0, y0, x0 + bw, y0 + bh, float(rng.uniform(0.0, 0.5))))
    return out


def _distractors(rng, img, difficulty):
    h, w = img.shape
    for _ in range(int(rng.poisson(3 * difficulty))):
        cx, cy = rng.uniform(0, w), rng.uniform(0.2 * h, h)
        ang, length = rng.uniform(0, math.pi), rng.uniform(3, 8)
        p0 = np.array([cx - length / 2 * math.cos(ang), cy - length / 2 * math.sin(ang)])
        p1 = np.array([cx + length / 2 * math.cos(ang), cy + length / 2 * math.sin(ang)])
        pts = np.stack([p0, p1])
        if pts[0, 1] > pts[1, 1]:
            pts = pts[::-1]
        d = polyline_distance(pts, (h, w))
        np.maximum(img, np.clip(1.2 - d, 0.0, 1.0) * rng.uniform(0.4, 0.8), out=img)


def scene_stream(seed: int, count: int, difficulty: float, stream: int = 0, **kw) -> Iterator[SyntheticScene]:
    """``count`` scenes, scene ``i`` drawn from its own child seed ``(seed, stream, i)``.

    Distinct ``stream`` values give disjoint sets (train vs held-out).
    """
    for i in range(count):
        rng = np.random.default_rng([seed, stream, i])
        yield generate_scene(rng, difficulty, seed=i, **kw)


def prefetch(factory: Callable[[], Iterator], maxsize: int = 8) -> Iterator:
    """Run a generator in a background thread through a bounded queue, preserving order."""
    q: queue.Queue = queue.Queue(maxsize)
    done = object()
    err: list[BaseException] = []

    def work():
        try:
            for item in factory():
                q.put(item)
        except BaseException as exc:  # surfaced in the consumer
            err.append(exc)
        finally:
            q.put(done)

    t = threading.Thread(target=work, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    t.join()
    if err:
        raise err[0]
