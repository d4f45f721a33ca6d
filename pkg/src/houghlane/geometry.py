"""Hough parameterization, lane polylines and ground-truth label rendering.

Coordinates follow the usual image convention: ``x`` is the column index and
``y`` the row index of a pixel centre, so pixel ``(j, i)`` sits at ``(j, i)``
and the image rectangle is ``[-0.5, W - 0.5] x [-0.5, H - 0.5]``.

A line is stored in normal form ``r = x cos(theta) + y sin(theta)`` with
``theta`` in ``[0, pi)`` and signed ``r`` measured from the spec origin.
Angle bin ``k`` is ``theta_k = k * pi / theta_bins``; distance bin ``k`` is
``r_k = r_min + k * (r_max - r_min) / (r_bins - 1)``, so both range ends are
bin centres. Rounding is to the nearest bin with ties going to the lower index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Sequence, Union

import numpy as np


class Origin(str, Enum):
    TOP_LEFT = "topleft"
    CENTER = "center"


class HoughRangeError(ValueError):
    """A line or pixel falls outside the parameter range of a HoughSpec."""


class DegenerateLaneError(ValueError):
    """A lane does not define a line (all samples coincide)."""


def round_half_down(u):
    """Nearest integer, ties toward the lower integer. Works on arrays."""
    return np.ceil(np.asarray(u, dtype=np.float64) - 0.5).astype(np.int64)


@dataclass(frozen=True)
class HoughSpec:
    theta_bins: int
    r_bins: int
    image_width: int
    image_height: int
    r_min: float
    r_max: float
    origin: Origin = Origin.CENTER

    def __post_init__(self):
        object.__setattr__(self, "origin", Origin(self.origin))
        if self.theta_bins < 2 or self.r_bins < 2:
            raise ValueError("theta_bins and r_bins must be >= 2")
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image dimensions must be >= 1")
        if not self.r_min < self.r_max:
            raise ValueError("r_min must be < r_max")
        lo, hi = _r_extent(self.corners(), self.origin_xy)
        tol = 1e-9 * max(1.0, abs(lo), abs(hi))
        if lo < self.r_min - tol or hi > self.r_max + tol:
            raise HoughRangeError(
                f"r range [{self.r_min}, {self.r_max}] does not cover the "
                f"{self.image_width}x{self.image_height} grid (needs [{lo}, {hi}])"
            )

    @classmethod
    def for_grid(cls, width: int, height: int, theta_bins: int, r_bins: int,
                 origin: Origin | str = Origin.CENTER) -> "HoughSpec":
        """Spec whose r axis exactly covers the image rectangle."""
        origin = Origin(origin)
        if origin is Origin.CENTER:
            half = math.hypot(width, height) / 2.0
            lo, hi = -half, half
        else:
            ox, oy = 0.0, 0.0
            corners = np.array([[-0.5, -0.5], [width - 0.5, -0.5],
                                [-0.5, height - 0.5], [width - 0.5, height - 0.5]])
            lo, hi = _r_extent(corners, (ox, oy))
        return cls(theta_bins, r_bins, width, height, float(lo), float(hi), origin)

    @property
    def origin_xy(self) -> tuple[float, float]:
        if self.origin is Origin.CENTER:
            return ((self.image_width - 1) / 2.0, (self.image_height - 1) / 2.0)
        return (0.0, 0.0)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.theta_bins, self.r_bins)

    @property
    def r_step(self) -> float:
        return (self.r_max - self.r_min) / (self.r_bins - 1)

    @property
    def theta_step(self) -> float:
        return math.pi / self.theta_bins

    def thetas(self) -> np.ndarray:
        return np.arange(self.theta_bins) * (math.pi / self.theta_bins)

    def rs(self) -> np.ndarray:
        return self.r_min + np.arange(self.r_bins) * self.r_step

    def corners(self) -> np.ndarray:
        w, h = self.image_width, self.image_height
        return np.array([[-0.5, -0.5], [w - 0.5, -0.5], [-0.5, h - 0.5], [w - 0.5, h - 0.5]])

    def r_index(self, r):
        """Nearest r bin (ties low); raises if r lies outside [r_min, r_max]."""
        r = np.asarray(r, dtype=np.float64)
        tol = 1e-9 * max(1.0, abs(self.r_min), abs(self.r_max))
        if np.any(r < self.r_min - tol) or np.any(r > self.r_max + tol):
            raise HoughRangeError(f"r outside [{self.r_min}, {self.r_max}]")
        idx = round_half_down((r - self.r_min) / self.r_step)
        return np.clip(idx, 0, self.r_bins - 1)

    def scaled(self, theta_bins: int, r_bins: int) -> "HoughSpec":
        """Same image binding and r range at a different quantization."""
        return HoughSpec(theta_bins, r_bins, self.image_width, self.image_height,
                         self.r_min, self.r_max, self.origin)


def _r_extent(corners: np.ndarray, origin: tuple[float, float]) -> tuple[float, float]:
    """Exact min/max of x cos t + y sin t over corners and t in [0, pi]."""
    lo, hi = math.inf, -math.inf
    for cx, cy in corners:
        x, y = cx - origin[0], cy - origin[1]
        mag, phi = math.hypot(x, y), math.atan2(y, x)
        # r(t) = mag * cos(t - phi): candidates are the interval ends and the
        # stationary points t = phi, phi + pi folded into [0, pi].
        cands = [x, -x]
        for t in (phi, phi + math.pi, phi - math.pi):
            if 0.0 <= t <= math.pi:
                cands.append(mag * math.cos(t - phi))
        lo, hi = min(lo, *cands), max(hi, *cands)
    return lo, hi


@dataclass(frozen=True)
class Line:
    """Continuous line in normal form, relative to some origin."""

    theta: float
    r: float

    def canonical(self) -> "Line":
        t, r = math.fmod(self.theta, 2 * math.pi), self.r
        if t < 0:
            t += 2 * math.pi
        if t >= math.pi:
            t, r = t - math.pi, -r
        if t >= math.pi:  # float fuzz right at the boundary
            t = 0.0
        return Line(t, r)


@dataclass(frozen=True)
class HoughPoint:
    theta_idx: int
    r_idx: int
    score: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def cell(self) -> tuple[int, int]:
        return (self.theta_idx, self.r_idx)


def line_through(p: Sequence[float], q: Sequence[float],
                 origin: tuple[float, float] = (0.0, 0.0)) -> Line:
    """Canonical normal-form line through image points ``p`` and ``q``."""
    dx, dy = q[0] - p[0], q[1] - p[1]
    norm = math.hypot(dx, dy)
    if norm == 0.0:
        raise DegenerateLaneError("coincident points do not define a line")
    nx, ny = -dy / norm, dx / norm
    r = nx * (p[0] - origin[0]) + ny * (p[1] - origin[1])
    return Line(math.atan2(ny, nx), r).canonical()


def _as_line(line, spec: HoughSpec) -> Line:
    if isinstance(line, Line):
        return line.canonical()
    p, q = line
    return line_through(p, q, spec.origin_xy)


def line_intersects_image(line: Line, spec: HoughSpec) -> bool:
    c, s = math.cos(line.theta), math.sin(line.theta)
    ox, oy = spec.origin_xy
    vals = [(x - ox) * c + (y - oy) * s - line.r for x, y in spec.corners()]
    return min(vals) <= 0.0 <= max(vals)


def line_to_hough(line: Union[Line, tuple], spec: HoughSpec) -> HoughPoint:
    """Nearest (theta, r) bin of a line given as a ``Line`` or a pair of points."""
    ln = _as_line(line, spec)
    if not line_intersects_image(ln, spec):
        raise HoughRangeError(f"{ln} does not intersect the image")
    t_idx = int(round_half_down(ln.theta / spec.theta_step))
    r = ln.r
    if t_idx == spec.theta_bins:
        # theta ~ pi is the same line as theta = 0 with negated r
        t_idx, r = 0, -r
    return HoughPoint(t_idx, int(spec.r_index(r)), 1.0)


def hough_to_line(point: HoughPoint, spec: HoughSpec) -> Line:
    if not (0 <= point.theta_idx < spec.theta_bins and 0 <= point.r_idx < spec.r_bins):
        raise IndexError(f"{point} outside a {spec.shape} parameter grid")
    return Line(point.theta_idx * spec.theta_step, spec.r_min + point.r_idx * spec.r_step)


def line_distance(a: Line, b: Line) -> tuple[float, float]:
    """(angle, distance) gap between two lines, honouring (t, r) ~ (t + pi, -r)."""
    a, b = a.canonical(), b.canonical()
    dt = b.theta - a.theta
    if dt > math.pi / 2:
        return (math.pi - dt, abs(b.r + a.r))
    if dt < -math.pi / 2:
        return (math.pi + dt, abs(b.r + a.r))
    return (abs(dt), abs(b.r - a.r))


# --------------------------------------------------------------------------
# lanes


@dataclass(eq=False)
class LanePolyline:
    points: np.ndarray
    id: int | str = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 2:
            raise ValueError(f"lane {self.id}: needs at least 2 points, got {len(pts)}")
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"lane {self.id}: non-finite coordinates")
        if np.any(np.diff(pts[:, 1]) <= 0):
            raise ValueError(f"lane {self.id}: y must be strictly increasing")
        self.points = pts

    @classmethod
    def from_xy(cls, xs, ys, id=0) -> "LanePolyline":
        return cls(np.column_stack([xs, ys]), id)

    @property
    def xs(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def ys(self) -> np.ndarray:
        return self.points[:, 1]

    @property
    def y_range(self) -> tuple[float, float]:
        return float(self.points[0, 1]), float(self.points[-1, 1])

    def x_at(self, ys) -> np.ndarray:
        """Linear interpolation of x at ``ys``; NaN outside the lane's extent."""
        ys = np.asarray(ys, dtype=np.float64)
        out = np.interp(ys, self.ys, self.xs)
        return np.where((ys >= self.ys[0]) & (ys <= self.ys[-1]), out, np.nan)

    def inside(self, width: float, height: float) -> bool:
        x, y = self.xs, self.ys
        return bool(np.all((x >= -0.5) & (x <= width - 0.5) & (y >= -0.5) & (y <= height - 0.5)))

    def __eq__(self, other):
        if not isinstance(other, LanePolyline):
            return NotImplemented
        return self.id == other.id and np.array_equal(self.points, other.points)

    def __repr__(self):
        return f"LanePolyline(id={self.id!r}, n={len(self.points)}, y={self.y_range})"


@dataclass
class LaneSet:
    lanes: list[LanePolyline] = field(default_factory=list)

    def __post_init__(self):
        self.lanes = list(self.lanes)
        ids = [ln.id for ln in self.lanes]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate lane ids: {ids}")

    def __len__(self) -> int:
        return len(self.lanes)

    def __iter__(self) -> Iterator[LanePolyline]:
        return iter(self.lanes)

    def __getitem__(self, i) -> LanePolyline:
        return self.lanes[i]

    def scaled(self, sx: float, sy: float) -> "LaneSet":
        """Lanes mapped to a grid resized by (sx, sy), keeping pixel centres aligned."""
        out = []
        for ln in self.lanes:
            pts = (ln.points + 0.5) * np.array([sx, sy]) - 0.5
            out.append(LanePolyline(pts, ln.id))
        return LaneSet(out)

    def flipped(self, width: int) -> "LaneSet":
        """Mirror about the vertical centre line of a ``width``-pixel image."""
        return LaneSet([LanePolyline(np.column_stack([width - 1 - ln.xs, ln.ys]), ln.id) for ln in self.lanes])


@dataclass
class HoughLabel:
    map: np.ndarray
    peaks: list[HoughPoint]


def bottom_samples(lane: LanePolyline, sample_count: int = 10,
                   bottom_fraction: float = 0.5) -> np.ndarray:
    """``sample_count`` points at equal y spacing over the lowest part of a lane."""
    if sample_count < 2:
        raise ValueError("sample_count must be >= 2")
    if not 0.0 < bottom_fraction <= 1.0:
        raise ValueError("bottom_fraction must lie in (0, 1]")
    y0, y1 = lane.y_range
    ys = np.linspace(y1 - bottom_fraction * (y1 - y0), y1, sample_count)
    return np.column_stack([np.interp(ys, lane.ys, lane.xs), ys])


def lane_pair_params(lane: LanePolyline, spec: HoughSpec, sample_count: int = 10,
                     bottom_fraction: float = 0.5) -> np.ndarray:
    """Continuous (theta, r) of each adjacent sample pair, unwrapped to one branch.

    Pair angles are folded onto the branch of the first pair so that lanes
    near theta = 0 / pi average sensibly; the returned rows may therefore
    have theta slightly outside [0, pi).
    """
    pts = bottom_samples(lane, sample_count, bottom_fraction)
    params = []
    for p, q in zip(pts[:-1], pts[1:]):
        try:
            ln = line_through(p, q, spec.origin_xy)
        except DegenerateLaneError:
            continue
        params.append((ln.theta, ln.r))
    if not params:
        raise DegenerateLaneError(f"lane {lane.id}: all samples coincide")
    arr = np.array(params)
    ref = arr[0, 0]
    up = arr[:, 0] - ref > math.pi / 2
    down = arr[:, 0] - ref < -math.pi / 2
    arr[up, 0] -= math.pi
    arr[up, 1] *= -1
    arr[down, 0] += math.pi
    arr[down, 1] *= -1
    return arr


def lane_line(lane: LanePolyline, spec: HoughSpec, sample_count: int = 10,
              bottom_fraction: float = 0.5) -> Line:
    """Mean (theta, r) of the adjacent-pair lines over the lane bottom."""
    arr = lane_pair_params(lane, spec, sample_count, bottom_fraction)
    theta, r = arr.mean(axis=0)
    return Line(float(theta), float(r)).canonical()


def lane_to_hough_point(lane: LanePolyline, spec: HoughSpec, sample_count: int = 10,
                        bottom_fraction: float = 0.5) -> HoughPoint:
    return line_to_hough(lane_line(lane, spec, sample_count, bottom_fraction), spec)


def gaussian_patch(radius: int) -> np.ndarray:
    """Unnormalized (2r+1)^2 Gaussian with exactly 1.0 at the centre."""
    sigma = (2 * radius + 1) / 6.0
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2 * sigma * sigma))
    g[radius, radius] = 1.0
    return g


def render_hough_label(lanes: LaneSet | Iterable[LanePolyline], spec: HoughSpec,
                       splat_radius: int = 3, sample_count: int = 10,
                       bottom_fraction: float = 0.5) -> HoughLabel:
    """Ground-truth Hough map: one Gaussian per lane peak, merged by max."""
    hmap = np.zeros(spec.shape, dtype=np.float64)
    peaks = []
    patch = gaussian_patch(splat_radius)
    for lane in lanes:
        try:
            pk = lane_to_hough_point(lane, spec, sample_count, bottom_fraction)
        except (HoughRangeError, DegenerateLaneError) as exc:
            raise type(exc)(f"lane {lane.id}: {exc}") from exc
        peaks.append(pk)
        t0, r0 = pk.theta_idx - splat_radius, pk.r_idx - splat_radius
        t_lo, t_hi = max(t0, 0), min(t0 + patch.shape[0], spec.theta_bins)
        r_lo, r_hi = max(r0, 0), min(r0 + patch.shape[1], spec.r_bins)
        sub = patch[t_lo - t0:t_hi - t0, r_lo - r0:r_hi - r0]
        np.maximum(hmap[t_lo:t_hi, r_lo:r_hi], sub, out=hmap[t_lo:t_hi, r_lo:r_hi])
    return HoughLabel(hmap, peaks)


def render_line_map(peaks: Iterable[HoughPoint], spec: HoughSpec, out_shape: tuple[int, int],
                    thickness: float = 1.0) -> np.ndarray:
    """Rasterize each peak's bin-centre line over an ``out_shape`` grid.

    The grid may differ in size from the one the spec binds; pixel centres are
    mapped onto the spec's grid and the distance test is done in output pixels.
    """
    h, w = out_shape
    out = np.zeros((h, w), dtype=np.uint8)
    sx, sy = spec.image_width / w, spec.image_height / h
    ox, oy = spec.origin_xy
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    for pk in peaks:
        ln = hough_to_line(pk, spec)
        c, s = math.cos(ln.theta), math.sin(ln.theta)
        # spec coordinate = (q + 0.5) * scale - 0.5, rewritten as a line in q
        a, b = c * sx, s * sy
        rhs = ln.r - c * (0.5 * sx - 0.5 - ox) - s * (0.5 * sy - 0.5 - oy)
        norm = math.hypot(a, b)
        dist = np.abs(a * jj + b * ii - rhs) / norm
        out[dist <= thickness / 2.0] = 1
    return out
