import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from houghlane.dht import (bench, build_bin_table, dht_backward, dht_forward, dht_torch, multi_scale_dht,
                           rht_reverse, rht_torch, thread_count, upsample_bilinear)
from houghlane.geometry import HoughPoint, HoughSpec, Origin, hough_to_line

from oracles import naive_bins, naive_dht


@pytest.mark.parametrize("w,h,t,r,origin", [(7, 5, 9, 11, "center"), (16, 16, 24, 24, "center"),
                                             (6, 9, 8, 13, "topleft"), (12, 4, 30, 17, "center")])
def test_bin_table_matches_naive(w, h, t, r, origin):
    spec = HoughSpec.for_grid(w, h, t, r, origin)
    table = build_bin_table(spec, (h, w))
    ref = naive_bins(w, h, t, r, spec.r_min, spec.r_max, spec.origin_xy)
    assert np.array_equal(table.r_index, ref)
    img = np.random.default_rng(0).random((h, w))
    assert np.allclose(dht_forward(img[None], table)[0], naive_dht(img, ref, t, r))


def test_every_pixel_votes_once_per_theta():
    spec = HoughSpec.for_grid(11, 7, 13, 9)
    table = build_bin_table(spec, (7, 11))
    per_pixel = np.asarray(table.forward.sum(axis=0)).ravel()
    assert np.all(per_pixel == 13)
    for k in range(13):
        block = table.forward[k * 9:(k + 1) * 9]
        assert np.all(np.asarray(block.sum(axis=0)).ravel() == 1)
    # reverse lists are the CSR rows
    cell = table.cell_pixels(3, 4)
    assert np.all(table.r_index[cell, 3] == 4)


def test_table_requires_matching_grid():
    spec = HoughSpec.for_grid(10, 8, 12, 12)
    with pytest.raises(ValueError):
        build_bin_table(spec, (10, 8))


@pytest.mark.parametrize("shape", [(5, 7, 6, 9), (16, 16, 24, 24), (20, 32, 40, 30), (9, 3, 12, 5)])
def test_adjoint_identity(shape):
    h, w, t, r = shape
    table = build_bin_table(HoughSpec.for_grid(w, h, t, r), (h, w))
    rng = np.random.default_rng(sum(shape))
    for _ in range(100):
        x, y = rng.normal(size=(2, h, w)), rng.normal(size=(2, t, r))
        lhs = float(np.sum(dht_forward(x, table) * y))
        rhs = float(np.sum(x * rht_reverse(y, table)))
        assert abs(lhs - rhs) <= 1e-6 * max(abs(lhs), 1e-12)


def test_backward_is_reverse():
    table = build_bin_table(HoughSpec.for_grid(8, 6, 10, 10), (6, 8))
    g = np.random.default_rng(3).normal(size=(3, 10, 10))
    assert np.array_equal(dht_backward(g, table), rht_reverse(g, table))


@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([(4, 4, 5, 5), (9, 13, 18, 16), (16, 16, 32, 32)]))
def test_mass_identity(seed, shape):
    h, w, t, r = shape
    table = build_bin_table(HoughSpec.for_grid(w, h, t, r), (h, w))
    x = np.random.default_rng(seed).normal(size=(2, h, w))
    g = dht_forward(x, table)
    for c in range(2):
        assert math.isclose(g[c].sum(), t * x[c].sum(), rel_tol=1e-6, abs_tol=1e-9)


def test_deterministic_bitwise_and_thread_invariant(monkeypatch):
    table = build_bin_table(HoughSpec.for_grid(40, 24, 36, 30), (24, 40))
    x = np.random.default_rng(5).normal(size=(4, 24, 40)).astype(np.float32)
    a = dht_forward(x, table, deterministic=True)
    b = dht_forward(x, table, deterministic=True)
    assert a.tobytes() == b.tobytes()
    monkeypatch.setenv("HOUGHLANE_THREADS", "4")
    assert thread_count() == 4 and thread_count(deterministic=True) == 1
    c = dht_forward(x, table)
    assert a.tobytes() == c.tobytes()
    y = np.random.default_rng(6).normal(size=(4, 36, 30))
    assert rht_reverse(y, table).tobytes() == rht_reverse(y, table, deterministic=True).tobytes()


def test_dtype_follows_input():
    table = build_bin_table(HoughSpec.for_grid(6, 6, 8, 8), (6, 6))
    assert dht_forward(np.ones((1, 6, 6), np.float32), table).dtype == np.float32
    assert dht_forward(np.ones((1, 6, 6)), table).dtype == np.float64
    with pytest.raises(ValueError):
        dht_forward(np.ones((6, 6)), table)


def test_torch_bridge_gradcheck():
    table = build_bin_table(HoughSpec.for_grid(5, 4, 6, 7), (4, 5))
    x = torch.randn(2, 3, 4, 5, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda v: dht_torch(v, table), (x,), eps=1e-6, atol=1e-8, rtol=1e-4)
    y = torch.randn(1, 2, 6, 7, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda v: rht_torch(v, table), (y,), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_central_differences_on_dht_backward():
    """dloss/dx via the adjoint against explicit central differences."""
    table = build_bin_table(HoughSpec.for_grid(4, 4, 6, 6), (4, 4))
    rng = np.random.default_rng(2)
    x, wts = rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 6, 6))

    def loss(v):
        return float(np.sum(np.tanh(dht_forward(v, table)) * wts))

    g_out = (1 - np.tanh(dht_forward(x, table)) ** 2) * wts
    analytic = dht_backward(g_out, table)
    eps = 1e-6
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        fd = (loss(xp) - loss(xm)) / (2 * eps)
        assert abs(fd - analytic[idx]) <= 1e-4 * max(abs(fd), 1e-3)


@given(st.data())
def test_peak_concentration_for_bin_centre_lines(data):
    w, h, t, r = 16, 16, 32, 32
    spec = HoughSpec.for_grid(w, h, t, r)
    table = build_bin_table(spec, (h, w))
    pk = HoughPoint(data.draw(st.integers(0, t - 1)), data.draw(st.integers(0, r - 1)))
    ln = hough_to_line(pk, spec)
    ox, oy = spec.origin_xy
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    d = (jj - ox) * math.cos(ln.theta) + (ii - oy) * math.sin(ln.theta) - ln.r
    img = (np.abs(d) < spec.r_step / 2).astype(float)
    if img.sum() == 0:
        return
    g = dht_forward(img[None], table)[0]
    assert g[pk.cell] == g.max()


def test_upsample_matches_torch():
    x = np.random.default_rng(0).normal(size=(3, 5, 7))
    ours = upsample_bilinear(x, (15, 21))
    ref = F.interpolate(torch.from_numpy(x)[None], size=(15, 21), mode="bilinear", align_corners=False)[0]
    assert np.allclose(ours, ref.numpy(), atol=1e-12)
    assert np.array_equal(upsample_bilinear(x, (5, 7)), x)
    assert upsample_bilinear(x, factor=3).shape == (3, 15, 21)
    with pytest.raises(ValueError):
        upsample_bilinear(x, (4, 7))


def test_multi_scale_is_composition_of_primitives():
    rng = np.random.default_rng(8)
    grids = [(16, 8), (8, 4), (4, 2)]
    specs = [HoughSpec.for_grid(w, h, tt, rr) for (w, h), (tt, rr) in zip(grids, [(12, 12), (6, 6), (3, 3)])]
    feats = [rng.normal(size=(2, h, w)) for w, h in grids]
    out = multi_scale_dht(feats, specs, (12, 12))
    manual = [upsample_bilinear(dht_forward(f, build_bin_table(s, f.shape[1:])), (12, 12))
              for f, s in zip(feats, specs)]
    assert np.allclose(out, np.concatenate(manual))
    with pytest.raises(ValueError):
        multi_scale_dht(feats[:2], specs[:2], (12, 12))


def test_bench_reports_mass_check():
    res = bench(12, 20, 16, 16, iters=2)
    assert res["mass_identity_ok"] and res["pixel_theta_per_s"] > 0
