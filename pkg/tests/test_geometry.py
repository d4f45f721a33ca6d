import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from houghlane.geometry import (DegenerateLaneError, HoughPoint, HoughRangeError, HoughSpec, LanePolyline,
                                LaneSet, Line, Origin, gaussian_patch, hough_to_line, lane_line,
                                lane_pair_params, lane_to_hough_point, line_distance, line_through,
                                line_to_hough, render_hough_label, render_line_map, round_half_down)

grids = st.tuples(st.integers(4, 64), st.integers(4, 64), st.integers(8, 90), st.integers(8, 90))


def test_round_half_down_ties_go_low():
    assert list(round_half_down([0.5, 1.5, 2.5, -0.5, 0.49, 0.51])) == [0, 1, 2, -1, 0, 1]


def test_spec_validation():
    with pytest.raises(ValueError):
        HoughSpec.for_grid(10, 10, 1, 10)
    with pytest.raises(HoughRangeError):
        HoughSpec(10, 10, 10, 10, -2.0, 2.0)
    spec = HoughSpec.for_grid(10, 6, 12, 9)
    assert spec.rs()[0] == spec.r_min and math.isclose(spec.rs()[-1], spec.r_max)
    assert spec.thetas()[-1] < math.pi


@given(grids, st.sampled_from(list(Origin)), st.floats(0, math.pi))
def test_r_range_covers_every_corner(g, origin, theta):
    w, h, t, r = g
    spec = HoughSpec.for_grid(w, h, t, r, origin)
    ox, oy = spec.origin_xy
    for x, y in spec.corners():
        v = (x - ox) * math.cos(theta) + (y - oy) * math.sin(theta)
        assert spec.r_min - 1e-9 <= v <= spec.r_max + 1e-9


@given(grids, st.data())
def test_bin_centre_lines_roundtrip(g, data):
    w, h, t, r = g
    spec = HoughSpec.for_grid(w, h, t, r)
    pt = HoughPoint(data.draw(st.integers(0, t - 1)), data.draw(st.integers(0, r - 1)))
    ln = hough_to_line(pt, spec)
    c, s = math.cos(ln.theta), math.sin(ln.theta)
    ox, oy = spec.origin_xy
    vals = [(x - ox) * c + (y - oy) * s - ln.r for x, y in spec.corners()]
    assume(min(vals) < 0 < max(vals))
    assert line_to_hough(ln, spec).cell == pt.cell


@given(st.floats(0.01, math.pi - 0.01), st.floats(-5, 5))
def test_theta_pi_alias(theta, r):
    spec = HoughSpec.for_grid(16, 16, 32, 32)
    a = line_to_hough(Line(theta, r), spec)
    b = line_to_hough(Line(theta + math.pi, -r), spec)
    assert a.cell == b.cell
    assert line_distance(Line(theta, r), Line(theta + math.pi, -r))[1] < 1e-9


def test_theta_near_pi_wraps_to_zero_with_negated_r():
    spec = HoughSpec.for_grid(16, 16, 32, 33)
    pt = line_to_hough(Line(math.pi - 1e-6, 3.0), spec)
    assert pt.theta_idx == 0
    assert pt.r_idx == int(spec.r_index(-3.0))


def test_line_outside_image_rejected():
    spec = HoughSpec.for_grid(16, 16, 32, 32)
    with pytest.raises(HoughRangeError):
        line_to_hough(Line(0.0, 11.0), spec)
    with pytest.raises(DegenerateLaneError):
        line_through((1, 1), (1, 1))


@given(st.floats(0, 15), st.floats(0, 15), st.floats(0, 15), st.floats(0, 15))
def test_line_through_contains_both_points(x0, y0, x1, y1):
    assume(math.hypot(x1 - x0, y1 - y0) > 1e-3)
    ln = line_through((x0, y0), (x1, y1), (7.5, 7.5))
    assert 0 <= ln.theta < math.pi
    for x, y in ((x0, y0), (x1, y1)):
        assert abs((x - 7.5) * math.cos(ln.theta) + (y - 7.5) * math.sin(ln.theta) - ln.r) < 1e-9


def _straight_lane(rng, spec):
    while True:
        w, h = spec.image_width, spec.image_height
        y0, y1 = sorted(rng.uniform(0, h - 1, 2))
        if y1 - y0 < 3:
            continue
        x0, x1 = rng.uniform(0, w - 1, 2)
        ys = np.linspace(y0, y1, int(rng.integers(3, 30)))
        xs = x0 + (x1 - x0) * (ys - y0) / (y1 - y0)
        return (x0, y0), (x1, y1), LanePolyline.from_xy(xs, ys)


def test_straight_lanes_map_to_generator_bin():
    rng = np.random.default_rng(99)
    spec = HoughSpec.for_grid(128, 80, 72, 72)
    hits = 0
    for _ in range(1000):
        p, q, lane = _straight_lane(rng, spec)
        hits += lane_to_hough_point(lane, spec).cell == line_to_hough((p, q), spec).cell
    assert hits == 1000


def _pair_oracle(lane, spec, n=10, frac=0.5):
    """Means of per-pair normals, computed with explicit vector algebra."""
    y0, y1 = lane.y_range
    ys = np.linspace(y1 - frac * (y1 - y0), y1, n)
    xs = np.interp(ys, lane.ys, lane.xs)
    ox, oy = spec.origin_xy
    thetas, rs = [], []
    for i in range(n - 1):
        d = np.array([xs[i + 1] - xs[i], ys[i + 1] - ys[i]])
        nrm = np.array([-d[1], d[0]]) / np.linalg.norm(d)
        if nrm[1] < 0 or (nrm[1] == 0 and nrm[0] < 0):
            nrm = -nrm
        thetas.append(math.atan2(nrm[1], nrm[0]))
        rs.append(float(nrm @ np.array([xs[i] - ox, ys[i] - oy])))
    thetas, rs = np.array(thetas), np.array(rs)
    ref = thetas[0]
    flip = np.abs(thetas - ref) > math.pi / 2
    thetas[flip] -= np.sign(thetas[flip] - ref) * math.pi
    rs[flip] *= -1
    return Line(thetas.mean(), rs.mean()).canonical()


@given(st.integers(0, 10_000))
def test_curved_lane_point_is_mean_of_pair_params(seed):
    rng = np.random.default_rng(seed)
    spec = HoughSpec.for_grid(128, 80, 72, 72)
    ys = np.linspace(rng.uniform(5, 30), 79, 40)
    t = (ys - ys[0]) / (ys[-1] - ys[0])
    xs = rng.uniform(20, 100) + rng.uniform(-40, 40) * t + rng.uniform(-10, 10) * t ** 2
    lane = LanePolyline.from_xy(xs, ys)
    ours = lane_line(lane, spec)
    ref = _pair_oracle(lane, spec)
    gap = line_distance(ours, ref)
    assert gap[0] < 1e-9 and gap[1] < 1e-7
    arr = lane_pair_params(lane, spec)
    assert np.ptp(arr[:, 0]) < math.pi / 2


def test_gaussian_patch():
    g = gaussian_patch(3)
    assert g.shape == (7, 7) and g[3, 3] == 1.0 and g.max() == 1.0
    sigma = 7 / 6
    assert math.isclose(g[3, 4], math.exp(-1 / (2 * sigma * sigma)))
    assert np.allclose(g, g.T) and np.allclose(g, g[::-1])


def test_render_label_peaks_are_unit_maxima():
    spec = HoughSpec.for_grid(128, 80, 72, 72)
    lanes = LaneSet([LanePolyline.from_xy([60, 20], [30, 79], id=0),
                     LanePolyline.from_xy([70, 110], [30, 79], id=1)])
    label = render_hough_label(lanes, spec)
    assert len(label.peaks) == 2
    for pk in label.peaks:
        assert label.map[pk.cell] == 1.0
    assert label.map.max() == 1.0 and label.map.min() >= 0.0


def test_render_label_names_bad_lane():
    spec = HoughSpec.for_grid(16, 16, 8, 8)
    with pytest.raises(HoughRangeError, match="lane 7"):
        render_hough_label([LanePolyline.from_xy([100, 101], [0, 5], id=7)], spec)


def test_line_map_marks_pixels_on_the_line():
    spec = HoughSpec.for_grid(32, 20, 36, 41)
    pk = line_to_hough(((3, 19), (20, 0)), spec)
    m = render_line_map([pk], spec, (20, 32), thickness=1.0)
    ln = hough_to_line(pk, spec)
    ox, oy = spec.origin_xy
    jj, ii = np.meshgrid(np.arange(32), np.arange(20))
    d = np.abs((jj - ox) * math.cos(ln.theta) + (ii - oy) * math.sin(ln.theta) - ln.r)
    assert np.array_equal(m.astype(bool), d <= 0.5)
    # a quarter-size output grid marks the same line in its own pixel units
    small = render_line_map([pk], spec, (5, 8), thickness=1.0)
    assert small.sum() >= 5


def test_polyline_validation():
    with pytest.raises(ValueError):
        LanePolyline.from_xy([1], [1])
    with pytest.raises(ValueError):
        LanePolyline.from_xy([1, 2], [3, 3])
    with pytest.raises(ValueError):
        LaneSet([LanePolyline.from_xy([1, 2], [1, 2]), LanePolyline.from_xy([1, 2], [1, 2])])
    ln = LanePolyline.from_xy([0, 10], [0, 10])
    assert ln.x_at([5])[0] == 5 and math.isnan(ln.x_at([11])[0])
    assert LaneSet([ln]).flipped(11)[0].xs.tolist() == [10, 0]
