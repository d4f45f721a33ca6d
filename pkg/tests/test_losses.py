import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from houghlane.geometry import HoughLabel, HoughPoint, gaussian_patch
from houghlane.losses import (EPS, LossPoisonedError, LossWeights, breakdown, hough_focal, location_loss,
                              multiscale_bce, range_loss, rht_line_loss, total_loss)

probs = arrays(np.float64, (4, 4), elements=st.floats(0.01, 0.99))
binary = arrays(np.float64, (4, 4), elements=st.sampled_from([0.0, 1.0]))


def _bce_loop(p, y):
    tot = 0.0
    for a, b in zip(np.ravel(p), np.ravel(y)):
        a = min(max(a, EPS), 1 - EPS)
        tot += -(b * math.log(a) + (1 - b) * math.log(1 - a))
    return tot / np.size(p)


def _focal_loop(p, y, n, alpha=2.0, beta=4.0):
    tot = 0.0
    for a, b in zip(np.ravel(p), np.ravel(y)):
        a = min(max(a, EPS), 1 - EPS)
        if b == 1:
            tot += (1 - a) ** alpha * math.log(a)
        else:
            tot += (1 - b) ** beta * a ** alpha * math.log(1 - a)
    return -tot / n


def test_bce_closed_forms(rng):
    y = (rng.random((4, 4)) > 0.5).astype(float)
    assert float(multiscale_bce(y, y)) <= 1.1e-7
    assert math.isclose(float(multiscale_bce(np.full((3, 3), 0.5), y[:3, :3])), math.log(2))
    p = rng.random((4, 4))
    assert math.isclose(float(multiscale_bce(p, y)), _bce_loop(p, y), rel_tol=1e-12)
    assert math.isclose(float(rht_line_loss(p, y)), _bce_loop(p, y), rel_tol=1e-12)
    with pytest.raises(ValueError):
        multiscale_bce(p, y[:3])


def test_focal_examples(rng):
    assert math.isclose(float(hough_focal(np.array([[0.5]]), np.array([[1.0]]), 3)),
                        -(0.5 ** 2) * math.log(0.5) / 3)
    target = np.zeros((8, 8))
    target[1:8, 0:7] = gaussian_patch(3)
    perfect = np.where(target == 1, 1.0, 0.0)
    assert float(hough_focal(perfect, target, 1)) < 1e-10
    p = rng.uniform(0.01, 0.99, (8, 8))
    label = HoughLabel(target, [HoughPoint(4, 3)])
    assert math.isclose(float(hough_focal(p, label, 1)), _focal_loop(p, target, 1), rel_tol=1e-12)
    assert float(hough_focal(p, target, 0)) == 0.0


@given(probs, binary)
def test_focal_alpha_zero_is_unnormalized_bce(p, y):
    f = float(hough_focal(p, y, 1, alpha=0.0, beta=3.0))
    assert math.isclose(f, _bce_loop(p, y) * p.size, rel_tol=1e-10)


def test_location_loss_examples(rng):
    p, y = rng.random((2, 3, 3)), (rng.random((2, 3, 3)) > 0.5).astype(float)
    assert math.isclose(float(location_loss(p, y, 1.0)), _bce_loop(p, y), rel_tol=1e-12)
    neg = np.zeros_like(p)
    assert float(location_loss(p, neg, 1.0)) == float(location_loss(p, neg, 10.0))
    two_p, two_y = np.array([0.8, 0.3]), np.array([1.0, 0.0])
    hand = -(10 * math.log(0.8) + math.log(0.7)) / 2
    assert math.isclose(float(location_loss(two_p, two_y, 10.0)), hand, rel_tol=1e-12)


def test_range_loss_examples(rng):
    assert math.isclose(float(range_loss(np.zeros((4, 2)), np.array([0, 1, 1, 0]))), math.log(2))
    big = np.array([[50.0, -50.0], [-50.0, 50.0]])
    assert float(range_loss(big, np.array([0, 1]))) < 1e-20
    lg, t = rng.normal(size=(5, 2)), np.array([1, 0, 1, 1, 0])
    ref = np.mean([np.logaddexp(*row) - row[k] for row, k in zip(lg, t)])
    assert math.isclose(float(range_loss(lg, t)), ref, rel_tol=1e-12)
    with pytest.raises(ValueError):
        range_loss(np.zeros((4, 3)), np.zeros(4))


def test_total_loss(rng):
    terms = {k: 1.0 for k in ("multi", "hough", "line", "loc", "range")}
    assert float(total_loss(terms)) == 1310.0
    assert float(total_loss({k: 0.0 for k in terms})) == 0.0
    vals = rng.random(5)
    w = LossWeights(*rng.random(5) * 10)
    got = float(total_loss(dict(zip(terms, vals)), w))
    assert math.isclose(got, float(np.dot(vals, [w.lambda_m, w.lambda_h, w.lambda_l, w.lambda_c, w.lambda_r])))
    with pytest.raises(LossPoisonedError, match="loc"):
        total_loss({"multi": 1.0, "loc": float("nan")})
    row = breakdown({"multi": torch.tensor(0.5)})
    assert row == {"multi": 0.5, "total": 50.0}


def test_weights_validated():
    with pytest.raises(ValueError):
        LossWeights(lambda_m=-1)
    with pytest.raises(ValueError):
        LossWeights(alpha=float("inf"))


@given(probs, binary, st.permutations(list(range(16))))
def test_losses_nonnegative_and_permutation_invariant(p, y, perm):
    pp, yy = p.ravel()[perm].reshape(4, 4), y.ravel()[perm].reshape(4, 4)
    for fn in (multiscale_bce, lambda a, b: hough_focal(a, b, 2), lambda a, b: location_loss(a, b, 3.0)):
        a, b = float(fn(p, y)), float(fn(pp, yy))
        assert a >= 0 and math.isclose(a, b, rel_tol=1e-12)


def _central_check(fn, x, eps=1e-6):
    xt = torch.tensor(x, requires_grad=True)
    fn(xt).backward()
    g = xt.grad.numpy()
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        fd = (float(fn(torch.tensor(xp))) - float(fn(torch.tensor(xm)))) / (2 * eps)
        assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), 1e-4), (idx, fd, g[idx])


def test_loss_gradients_match_central_differences(rng):
    y = (rng.random((4, 4)) > 0.5).astype(float)
    soft = np.outer(np.hanning(4), np.hanning(4))
    soft[1, 1] = 1.0
    p = rng.uniform(0.05, 0.95, (4, 4))
    _central_check(lambda v: multiscale_bce(v, y), p)
    _central_check(lambda v: rht_line_loss(v, y), p)
    _central_check(lambda v: hough_focal(v, soft, 2), p)
    _central_check(lambda v: location_loss(v, y, 5.0), p)
    _central_check(lambda v: range_loss(v.reshape(8, 2), (y.ravel()[:8] > 0).astype(int)), rng.normal(size=(4, 4)))
