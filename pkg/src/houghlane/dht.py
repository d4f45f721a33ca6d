"""Deep Hough Transform accumulator and its adjoint.

Feature maps are plain ``(C, H, W)`` arrays and Hough features ``(C, Theta, R)``
arrays. The transform is a fixed 0/1 linear map: every pixel adds its channel
vector into exactly one r bin per theta column. The reverse transform is the
exact transpose and doubles as the gradient.

Both directions run over disjoint output partitions (theta blocks forward,
pixel blocks backward), so the summation order of every output cell is fixed
regardless of the thread count. ``HOUGHLANE_THREADS`` caps the pool size.
"""
from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import torch

from .geometry import HoughSpec


def thread_count(deterministic: bool = False) -> int:
    if deterministic:
        return 1
    env = os.environ.get("HOUGHLANE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True, eq=False)
class BinTable:
    """Per-pixel r bin for every theta column, plus the reverse cell lists.

    ``r_index[p, k]`` is the r bin of flat pixel ``p`` (row-major) under
    ``theta_k``. ``forward`` is the (Theta*R, P) incidence matrix whose CSR rows
    are the reverse lists: ``forward.indices[forward.indptr[c]:forward.indptr[c+1]]``
    holds the pixels voting into flat cell ``c = k * R + r``.
    """

    spec: HoughSpec
    height: int
    width: int
    r_index: np.ndarray
    forward: sp.csr_matrix

    @property
    def hough_shape(self) -> tuple[int, int]:
        return self.spec.shape

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def cell_pixels(self, theta_idx: int, r_idx: int) -> np.ndarray:
        c = theta_idx * self.spec.r_bins + r_idx
        return self.forward.indices[self.forward.indptr[c]:self.forward.indptr[c + 1]]

    @cached_property
    def adjoint(self) -> sp.csr_matrix:
        return self.forward.T.tocsr()


def build_bin_table(spec: HoughSpec, spatial_shape: tuple[int, int]) -> BinTable:
    h, w = spatial_shape
    if (spec.image_width, spec.image_height) != (w, h):
        raise ValueError(
            f"spec binds a {spec.image_width}x{spec.image_height} grid, got {w}x{h}"
        )
    ox, oy = spec.origin_xy
    ii, jj = np.divmod(np.arange(h * w), w)
    t = spec.thetas()
    r = (jj - ox)[:, None] * np.cos(t)[None, :] + (ii - oy)[:, None] * np.sin(t)[None, :]
    r_index = spec.r_index(r).astype(np.int32)  # raises HoughRangeError if uncovered
    rows = (np.arange(spec.theta_bins)[None, :] * spec.r_bins + r_index).ravel()
    cols = np.repeat(np.arange(h * w), spec.theta_bins)
    mat = sp.csr_matrix(
        (np.ones(rows.size), (rows, cols)),
        shape=(spec.theta_bins * spec.r_bins, h * w),
    )
    mat.sort_indices()
    r_index.setflags(write=False)
    return BinTable(spec, h, w, r_index, mat)


def _blocked_matmul(mat: sp.csr_matrix, dense: np.ndarray, threads: int, align: int) -> np.ndarray:
    """``mat @ dense`` with rows split across threads; each row has one writer."""
    if threads <= 1:
        return np.asarray(mat @ dense)
    out = np.empty((mat.shape[0], dense.shape[1]), dtype=np.float64)
    step = max(align, math.ceil(mat.shape[0] / align / threads) * align)
    blocks = [(lo, min(lo + step, mat.shape[0])) for lo in range(0, mat.shape[0], step)]

    def run(block):
        lo, hi = block
        out[lo:hi] = mat[lo:hi] @ dense

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(run, blocks))
    return out


def _check_features(features: np.ndarray, shape: tuple[int, int], what: str) -> np.ndarray:
    arr = np.asarray(features)
    if arr.ndim != 3 or arr.shape[1:] != tuple(shape):
        raise ValueError(f"{what} must have shape (C, {shape[0]}, {shape[1]}), got {arr.shape}")
    return arr


def dht_forward(features: np.ndarray, table: BinTable, deterministic: bool = False) -> np.ndarray:
    """Scatter-add each pixel's channel vector into its bin of every theta column."""
    x = _check_features(features, (table.height, table.width), "features")
    c = x.shape[0]
    flat = x.reshape(c, -1).astype(np.float64, copy=False).T
    out = _blocked_matmul(table.forward, flat, thread_count(deterministic), table.spec.r_bins)
    out_dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    return out.T.reshape(c, *table.hough_shape).astype(out_dtype, copy=False)


def rht_reverse(hough: np.ndarray, table: BinTable, deterministic: bool = False) -> np.ndarray:
    """Adjoint of :func:`dht_forward`: ``out[p] = sum_k hough[k, r_index[p, k]]``."""
    g = _check_features(hough, table.hough_shape, "hough features")
    c = g.shape[0]
    flat = g.reshape(c, -1).astype(np.float64, copy=False).T
    out = _blocked_matmul(table.adjoint, flat, thread_count(deterministic), 1)
    out_dtype = g.dtype if np.issubdtype(g.dtype, np.floating) else np.float64
    return out.T.reshape(c, table.height, table.width).astype(out_dtype, copy=False)


def dht_backward(upstream_grad: np.ndarray, table: BinTable, deterministic: bool = False) -> np.ndarray:
    """Gradient of ``dht_forward`` w.r.t. its input, given the output gradient."""
    return rht_reverse(upstream_grad, table, deterministic)


def upsample_bilinear(grid: np.ndarray, size=None, factor: float | None = None) -> np.ndarray:
    """Half-pixel (align_corners=False) bilinear resize of the last two axes."""
    arr = np.asarray(grid, dtype=np.float64)
    h, w = arr.shape[-2:]
    if size is None:
        if factor is None:
            raise ValueError("size or factor required")
        size = (int(math.floor(h * factor)), int(math.floor(w * factor)))
    th, tw = size
    if th < h or tw < w:
        raise ValueError(f"cannot downscale {h}x{w} to {th}x{tw}")
    if (th, tw) == (h, w):
        return arr.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h, th)
    x0, x1, fx = axis(w, tw)
    top = arr[..., y0, :] * (1 - fy)[:, None] + arr[..., y1, :] * fy[:, None]
    return top[..., x0] * (1 - fx) + top[..., x1] * fx


def multi_scale_dht(features: Sequence[np.ndarray], specs: Sequence[HoughSpec | BinTable],
                    target_shape: tuple[int, int],
                    fusion: Callable[[np.ndarray], np.ndarray] | None = None,
                    deterministic: bool = False) -> np.ndarray:
    """Per-scale DHT, bilinear resize to ``target_shape``, channel concat, optional fusion."""
    if len(features) != 3 or len(specs) != 3:
        raise ValueError(f"expected exactly 3 scales, got {len(features)} maps / {len(specs)} specs")
    blocks = []
    for feat, spec in zip(features, specs):
        table = spec if isinstance(spec, BinTable) else build_bin_table(spec, np.shape(feat)[1:])
        g = dht_forward(feat, table, deterministic)
        blocks.append(upsample_bilinear(g, target_shape))
    stacked = np.concatenate(blocks, axis=0)
    return stacked if fusion is None else fusion(stacked)


# --------------------------------------------------------------------------
# autograd bridge


class _DHT(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, table):
        ctx.table = table
        b, c = x.shape[:2]
        out = dht_forward(x.detach().reshape(b * c, *x.shape[2:]).numpy(), table, True)
        return torch.from_numpy(out).reshape(b, c, *table.hough_shape).to(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        table = ctx.table
        b, c = grad.shape[:2]
        g = rht_reverse(grad.detach().reshape(b * c, *grad.shape[2:]).numpy(), table, True)
        return torch.from_numpy(g).reshape(b, c, table.height, table.width).to(grad.dtype), None


class _RHT(torch.autograd.Function):
    @staticmethod
    def forward(ctx, y, table):
        ctx.table = table
        b, c = y.shape[:2]
        out = rht_reverse(y.detach().reshape(b * c, *y.shape[2:]).numpy(), table, True)
        return torch.from_numpy(out).reshape(b, c, table.height, table.width).to(y.dtype)

    @staticmethod
    def backward(ctx, grad):
        table = ctx.table
        b, c = grad.shape[:2]
        g = dht_forward(grad.detach().reshape(b * c, *grad.shape[2:]).numpy(), table, True)
        return torch.from_numpy(g).reshape(b, c, *table.hough_shape).to(grad.dtype), None


def dht_torch(x: torch.Tensor, table: BinTable) -> torch.Tensor:
    """Differentiable DHT on a ``(B, C, H, W)`` tensor."""
    return _DHT.apply(x, table)


def rht_torch(y: torch.Tensor, table: BinTable) -> torch.Tensor:
    """Differentiable reverse transform on a ``(B, C, Theta, R)`` tensor."""
    return _RHT.apply(y, table)


# --------------------------------------------------------------------------


def bench(height: int, width: int, theta_bins: int, r_bins: int, iters: int = 10,
          channels: int = 1, seed: int = 0, deterministic: bool = False) -> dict:
    """Accumulator throughput in pixel-theta updates per second, plus a mass check."""
    spec = HoughSpec.for_grid(width, height, theta_bins, r_bins)
    table = build_bin_table(spec, (height, width))
    x = np.random.default_rng(seed).random((channels, height, width), dtype=np.float32)
    expected = theta_bins * x.astype(np.float64).sum()
    mass_ok = True
    t0 = time.perf_counter()
    for _ in range(iters):
        g = dht_forward(x, table, deterministic)
        mass_ok &= bool(abs(g.astype(np.float64).sum() - expected) <= 1e-6 * abs(expected))
    elapsed = time.perf_counter() - t0
    updates = iters * channels * height * width * theta_bins
    return {
        "height": height, "width": width, "theta": theta_bins, "r": r_bins,
        "iters": iters, "channels": channels, "seconds": elapsed,
        "pixel_theta_per_s": updates / elapsed if elapsed > 0 else float("inf"),
        "mass_identity_ok": mass_ok,
    }
