"""Toy end-to-end model, targets, training loop and synthetic evaluation.

A small stride-2 conv extractor with a top-down neck stands in for the
backbone and FPN. Everything after the neck (Hough aggregation, map decoder,
line branch, dynamic-convolution instance head, row decoding) is the real
head. Ablation presets reroute the head the way the component study does.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import losses as L
from .datasets import TuSimpleRecord
from .dht import BinTable, build_bin_table, dht_torch, rht_torch
from .geometry import HoughPoint, HoughSpec, LaneSet, render_hough_label, render_line_map
from .head import (KernelRegressor, LaneDecoder, LocationMap, dynamic_conv_apply, gather_hough_features,
                   lanes_from_location_maps, nms_select, regress_kernels, to_location_maps)
from .metrics import EvalResult, merge, tusimple_accuracy
from .serialization import FormatError, load_checkpoint, save_checkpoint
from .synth import SyntheticScene, lane_mask, prefetch, scene_stream


@dataclass(frozen=True)
class Ablation:
    proposal: str  # "slots", "s_dht" or "m_dht"
    h_decoder: bool
    rht_loss: bool


ABLATIONS = {
    "baseline": Ablation("slots", False, False),
    "s_dht": Ablation("s_dht", False, False),
    "s_dht_hdec": Ablation("s_dht", True, False),
    "m_dht_hdec": Ablation("m_dht", True, False),
    "full": Ablation("m_dht", True, True),
}

STRIDES = (4, 8, 16)


@dataclass(frozen=True)
class PipelineConfig:
    input_size: tuple[int, int] = (640, 360)  # (W, H)
    in_channels: int = 3
    hough_map_size: tuple[int, int] = (240, 240)  # (Theta, R)
    hough_head_channels: int = 128
    instance_channels: int = 32
    backbone_channels: tuple[int, ...] = (64, 128, 256, 512)
    neck_channels: int = 128
    ablation: str = "full"
    nms_threshold: float = 0.1
    nms_kernel: int = 5
    splat_radius: int = 3
    sample_count: int = 10
    bottom_fraction: float = 0.5
    max_lanes: int = 5
    kernel_size: int = 3
    norm_groups: int = 0  # GroupNorm groups in the extractor; 0 disables
    instance_stride: int = 4
    mlp_hidden: int | None = None
    location_thickness: float = 3.0
    seg_thickness: float = 1.0
    line_thickness: float = 1.0
    presence_threshold: float = 0.5
    decode_mode: str = "expectation"
    lr: float = 3e-4
    lr_schedule: str = "constant"  # or "cosine": decay to 0 over the run
    seed: int = 0
    difficulty: float = 0.5
    px_threshold: float | None = None
    eval_scenes: int = 50
    augment: bool = False  # per-epoch flip, gain/offset jitter and fresh noise
    weights: L.LossWeights = field(default_factory=L.LossWeights)

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {sorted(ABLATIONS)}, got {self.ablation!r}")
        w, h = self.input_size
        if w < STRIDES[-1] or h < STRIDES[-1]:
            raise ValueError(f"input size {self.input_size} is smaller than the coarsest stride {STRIDES[-1]}")
        if len(self.backbone_channels) != 4:
            raise ValueError("backbone needs exactly 4 stages (3 scales are used)")
        if self.instance_stride not in (2, 4):
            raise ValueError("instance_stride must be 2 or 4")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.instance_channels < 3:
            raise ValueError("instance_channels must leave room for 2 coordinate channels")

    # -- presets ---------------------------------------------------------

    @classmethod
    def small(cls, dataset: str = "tusimple", **kw) -> "PipelineConfig":
        sizes = {"tusimple": (240, 240), "culane": (360, 216), "llamas": (360, 360)}
        thr = {"tusimple": 0.1, "culane": 0.15, "llamas": 0.15}
        return cls(hough_map_size=sizes[dataset], nms_threshold=thr[dataset], **kw)

    @classmethod
    def toy(cls, **kw) -> "PipelineConfig":
        """Desk-scale config: 128x80 grayscale input, head widths of Small / 4."""
        base = dict(input_size=(128, 80), in_channels=1, hough_map_size=(72, 72),
                    hough_head_channels=32, instance_channels=8, backbone_channels=(8, 16, 24, 32),
                    neck_channels=32, splat_radius=2, location_thickness=3.0, instance_stride=2,
                    norm_groups=8, mlp_hidden=64, augment=False)
        base.update(kw)
        return cls(**base)

    @classmethod
    def tiny(cls, **kw) -> "PipelineConfig":
        """Frozen 16x16 config for end-to-end gradient checks."""
        base = dict(input_size=(16, 16), in_channels=1, hough_map_size=(24, 24),
                    hough_head_channels=4, instance_channels=4, backbone_channels=(3, 4, 4, 4),
                    neck_channels=4, splat_radius=1, max_lanes=2, mlp_hidden=4)
        base.update(kw)
        return cls(**base)

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    # -- derived geometry ------------------------------------------------

    @property
    def mode(self) -> Ablation:
        return ABLATIONS[self.ablation]

    @property
    def width(self) -> int:
        return self.input_size[0]

    @property
    def height(self) -> int:
        return self.input_size[1]

    @property
    def feature_hough_size(self) -> tuple[int, int]:
        return (math.ceil(self.hough_map_size[0] / 3), math.ceil(self.hough_map_size[1] / 3))

    @property
    def map_factor(self) -> int:
        return 3 if self.mode.h_decoder else 1

    @property
    def label_size(self) -> tuple[int, int]:
        """Resolution of the predicted (and ground-truth) Hough map."""
        if self.mode.h_decoder:
            t, r = self.feature_hough_size
            return (3 * t, 3 * r)
        return self.feature_hough_size

    @property
    def label_spec(self) -> HoughSpec:
        return HoughSpec.for_grid(self.width, self.height, *self.label_size)

    def grid(self, stride: int) -> tuple[int, int]:
        # stride-2 convs with padding 1 round up
        return (math.ceil(self.height / stride), math.ceil(self.width / stride))

    def scale_hough_size(self, level: int) -> tuple[int, int]:
        t, r = self.feature_hough_size
        return (max(2, math.ceil(t / 2 ** level)), max(2, math.ceil(r / 2 ** level)))

    @property
    def scene_spec(self) -> HoughSpec:
        """Reference grid for synthetic-scene peak spacing; independent of the ablation."""
        return HoughSpec.for_grid(self.width, self.height, *self.hough_map_size)

    @property
    def accuracy_px(self) -> float:
        """Point threshold: the benchmark's 20 px at 1280 width, scaled to this input."""
        return self.px_threshold if self.px_threshold is not None else 20.0 * self.width / 1280.0

    @property
    def h_samples(self) -> list[int]:
        return list(range(0, self.height, 2))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = dataclasses.asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        d["weights"] = L.LossWeights(**d.get("weights", {}))
        for k in ("input_size", "hough_map_size", "backbone_channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


# --------------------------------------------------------------------------
# model


def _coords(h: int, w: int, stride: int, spec: HoughSpec) -> torch.Tensor:
    """(2, h, w) image-plane coordinates of each cell centre, centred and divided by r_max.

    Same frame as the Hough coordinates, so a lane's line is x cos + y sin = r.
    """
    cx, cy = spec.origin_xy
    xs = (torch.arange(w, dtype=torch.float32) + 0.5) * stride - 0.5
    ys = (torch.arange(h, dtype=torch.float32) + 0.5) * stride - 0.5
    yy, xx = torch.meshgrid((ys - cy) / spec.r_max, (xs - cx) / spec.r_max, indexing="ij")
    return torch.stack([xx, yy])


def _norm(cfg: PipelineConfig, channels: int) -> nn.Module:
    if cfg.norm_groups <= 0:
        return nn.Identity()
    return nn.GroupNorm(math.gcd(cfg.norm_groups, channels), channels)


def _hough_coords(spec: HoughSpec) -> torch.Tensor:
    """(3, Theta, R): cos(theta), sin(theta), r / r_max, so line geometry is linear in the inputs."""
    t = torch.as_tensor(spec.thetas(), dtype=torch.float32)
    r = torch.as_tensor(spec.rs() / spec.r_max, dtype=torch.float32)
    tt, rr = torch.meshgrid(t, r, indexing="ij")
    return torch.stack([torch.cos(tt), torch.sin(tt), rr])


HOUGH_COORDS = 3


@dataclass
class ToyOutput:
    features: list[torch.Tensor]  # neck outputs at strides 4, 8, 16
    seg: torch.Tensor  # (B, h4, w4) lane probability
    inst_feat: torch.Tensor  # (B, I, h, w) at the instance stride
    hough_feat: torch.Tensor | None = None  # (B, C+3, Theta_f, R_f)
    hough_map: torch.Tensor | None = None  # (B, Theta_m, R_m) probability
    line_map: torch.Tensor | None = None  # (B, h4, w4) probability
    slot_vecs: torch.Tensor | None = None  # (B, K, C+3)
    slot_exist: torch.Tensor | None = None  # (B, K) probability


class ToyHoughLaneNet(nn.Module):
    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        self.cfg = cfg
        mode = cfg.mode
        chans = cfg.backbone_channels
        nc, ch, ic = cfg.neck_channels, cfg.hough_head_channels, cfg.instance_channels

        stages, cin = [], cfg.in_channels
        for co in chans:
            stages.append(nn.Sequential(nn.Conv2d(cin, co, 3, 2, 1), _norm(cfg, co), nn.ReLU(),
                                        nn.Conv2d(co, co, 3, 1, 1), _norm(cfg, co), nn.ReLU()))
            cin = co
        self.stages = nn.ModuleList(stages)
        self.lateral = nn.ModuleList(nn.Conv2d(c, nc, 1) for c in chans[1:])
        self.smooth = nn.ModuleList(nn.Conv2d(nc, nc, 3, padding=1) for _ in chans[1:])
        self.seg_head = nn.Sequential(nn.Conv2d(nc, nc, 3, padding=1), nn.ReLU(), nn.Conv2d(nc, 1, 1))

        self.tables: list[BinTable] = []
        if mode.proposal == "m_dht":
            for level, stride in enumerate(STRIDES):
                h, w = cfg.grid(stride)
                spec = HoughSpec.for_grid(w, h, *cfg.scale_hough_size(level))
                self.tables.append(build_bin_table(spec, (h, w)))
            self.hough_proj = nn.ModuleList(nn.Conv2d(nc, ch, 1) for _ in STRIDES)
            self.hough_fuse = nn.Conv2d(3 * ch, ch, 3, padding=1)
        elif mode.proposal == "s_dht":
            h, w = cfg.grid(STRIDES[0])
            spec = HoughSpec.for_grid(w, h, *cfg.feature_hough_size)
            self.tables.append(build_bin_table(spec, (h, w)))
            self.hough_proj = nn.Conv2d(3 * nc, ch, 1)
            self.hough_fuse = nn.Conv2d(ch, ch, 3, padding=1)

        h4, w4 = cfg.grid(STRIDES[0])
        if mode.proposal != "slots":
            fspec = HoughSpec.for_grid(w4, h4, *cfg.feature_hough_size)
            self.register_buffer("hough_xy", _hough_coords(fspec), persistent=False)
            self.map_conv1 = nn.Conv2d(ch + HOUGH_COORDS, ch, 3, padding=1)
            self.map_conv2 = nn.Conv2d(ch, 1, 3, padding=1)
            nn.init.constant_(self.map_conv2.bias, -math.log((1 - 0.1) / 0.1))
            if mode.rht_loss:
                self.rht_table = self.tables[0]
                self.line_head = nn.Conv2d(ch, 1, 1)
        else:
            h16, w16 = cfg.grid(STRIDES[-1])
            self.slot_conv = nn.Conv2d(nc, nc, 3, padding=1)
            self.slot_fc = nn.Linear(nc * h16 * w16, cfg.max_lanes * (ch + HOUGH_COORDS))
            self.slot_exist = nn.Linear(nc * h16 * w16, cfg.max_lanes)

        hi, wi = cfg.grid(cfg.instance_stride)
        self.register_buffer("inst_xy", _coords(hi, wi, cfg.instance_stride, cfg.label_spec), persistent=False)
        skip = chans[0] if cfg.instance_stride == 2 else 0
        self.inst_proj = nn.Conv2d(nc + skip, ic - 2, 3 if skip else 1, padding=1 if skip else 0)
        hidden = cfg.mlp_hidden or ch
        self.regressor = KernelRegressor(ch + HOUGH_COORDS, ic, ic, cfg.kernel_size, hidden=(hidden,))
        self.decoder = LaneDecoder(ic, (cfg.height, cfg.width))

    # -- forward pieces --------------------------------------------------

    def neck(self, images: torch.Tensor) -> list[torch.Tensor]:
        return self._pyramid(images)[1]

    def _pyramid(self, images: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Stride-2 stem output and neck outputs at strides 4, 8, 16."""
        feats, x = [], images
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        lat = [conv(f) for conv, f in zip(self.lateral, feats[1:])]
        outs = [lat[-1]]
        for f in reversed(lat[:-1]):
            outs.insert(0, f + F.interpolate(outs[0], size=f.shape[-2:], mode="bilinear", align_corners=False))
        return feats[0], [torch.relu(conv(o)) for conv, o in zip(self.smooth, outs)]

    def hough_features(self, feats: list[torch.Tensor]) -> torch.Tensor:
        size = self.cfg.feature_hough_size
        if self.cfg.mode.proposal == "m_dht":
            blocks = []
            for proj, table, f in zip(self.hough_proj, self.tables, feats):
                g = dht_torch(proj(f), table) / table.height
                blocks.append(F.interpolate(g, size=size, mode="bilinear", align_corners=False)
                              if g.shape[-2:] != size else g)
            g = torch.cat(blocks, 1)
        else:
            base = feats[0]
            up = [F.interpolate(f, size=base.shape[-2:], mode="bilinear", align_corners=False) for f in feats[1:]]
            table = self.tables[0]
            g = dht_torch(self.hough_proj(torch.cat([base, *up], 1)), table) / table.height
        return torch.relu(self.hough_fuse(g))

    def forward(self, images: torch.Tensor) -> ToyOutput:
        cfg, mode = self.cfg, self.cfg.mode
        stem, feats = self._pyramid(images)
        b = images.shape[0]
        seg = torch.sigmoid(self.seg_head(feats[0]))[:, 0]
        base = feats[0]
        if cfg.instance_stride == 2:
            up = F.interpolate(base, size=stem.shape[-2:], mode="bilinear", align_corners=False)
            base = torch.cat([up, stem], 1)
        inst = torch.cat([self.inst_proj(base), self.inst_xy.expand(b, -1, -1, -1)], 1)
        out = ToyOutput(feats, seg, inst)
        if mode.proposal == "slots":
            flat = torch.relu(self.slot_conv(feats[-1])).flatten(1)
            out.slot_vecs = self.slot_fc(flat).reshape(b, cfg.max_lanes, -1)
            out.slot_exist = torch.sigmoid(self.slot_exist(flat))
            return out
        fh = self.hough_features(feats)
        out.hough_feat = torch.cat([fh, self.hough_xy.expand(b, -1, -1, -1)], 1)
        m = torch.relu(self.map_conv1(out.hough_feat))
        if mode.h_decoder:
            m = F.interpolate(m, scale_factor=3, mode="bilinear", align_corners=False)
        out.hough_map = torch.sigmoid(self.map_conv2(m))[:, 0]
        if mode.rht_loss:
            lines = rht_torch(fh, self.rht_table) / self.rht_table.spec.theta_bins
            out.line_map = torch.sigmoid(self.line_head(lines))[:, 0]
        return out

    def instance_vectors(self, out: ToyOutput, b: int, peaks: Sequence[HoughPoint] | None = None,
                         slots: Sequence[int] | None = None) -> torch.Tensor:
        if out.slot_vecs is not None:
            idx = torch.as_tensor(list(slots if slots is not None else []), dtype=torch.long)
            return out.slot_vecs[b, idx]
        return gather_hough_features(out.hough_feat[b], list(peaks or []), self.cfg.map_factor)

    def instances(self, out: ToyOutput, b: int, vecs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        kernels = regress_kernels(vecs, self.regressor)
        return dynamic_conv_apply(out.inst_feat[b], kernels, self.decoder)

    # -- inference -------------------------------------------------------

    def propose(self, out: ToyOutput, b: int):
        """Peaks from NMS on the Hough map, or active slots for the baseline."""
        cfg = self.cfg
        if out.slot_exist is not None:
            scores = out.slot_exist[b].detach().numpy()
            return {"slots": [int(i) for i in np.nonzero(scores >= cfg.presence_threshold)[0]]}
        hm = out.hough_map[b].detach().numpy()
        return {"peaks": nms_select(hm, cfg.nms_kernel, cfg.nms_threshold).points}

    @torch.no_grad()
    def predict(self, images: torch.Tensor, threshold: float | None = None) -> list[LaneSet]:
        cfg = self.cfg if threshold is None else self.cfg.replace(nms_threshold=threshold)
        saved, self.cfg = self.cfg, cfg
        try:
            out = self(images)
            result = []
            for b in range(images.shape[0]):
                vecs = self.instance_vectors(out, b, **self.propose(out, b))
                if vecs.shape[0] == 0:
                    result.append(LaneSet([]))
                    continue
                logits, rows = self.instances(out, b, vecs)
                result.append(lanes_from_location_maps(to_location_maps(logits, rows),
                                                       cfg.presence_threshold, cfg.decode_mode))
            return result
        finally:
            self.cfg = saved


def toy_forward(model: ToyHoughLaneNet, image, peaks: Sequence[HoughPoint] | None = None):
    """Everything the losses consume for one image.

    Returns ``(features, hough_map, line_map, location_maps)``; when ``peaks``
    is None the instances come from the model's own proposals.
    """
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))
    while x.ndim < 4:
        x = x.unsqueeze(0)
    with torch.no_grad():
        out = model(x)
        if peaks is None:
            vecs = model.instance_vectors(out, 0, **model.propose(out, 0))
        else:
            vecs = model.instance_vectors(out, 0, peaks=peaks, slots=range(len(peaks)))
        logits, rows = model.instances(out, 0, vecs)
    hmap = None if out.hough_map is None else out.hough_map[0].numpy()
    lmap = None if out.line_map is None else out.line_map[0].numpy()
    return [f[0].numpy() for f in out.features], hmap, lmap, to_location_maps(logits, rows)


# --------------------------------------------------------------------------
# targets and loss


@dataclass
class Targets:
    seg: torch.Tensor
    hough: torch.Tensor
    peaks: list[HoughPoint]
    line: torch.Tensor
    loc: torch.Tensor  # (N, H, W)
    rows: torch.Tensor  # (N, H)
    slot_order: list[int]  # lane indices sorted left to right at the bottom

    @property
    def n_lanes(self) -> int:
        return len(self.peaks)


def make_targets(lanes: LaneSet, cfg: PipelineConfig) -> Targets:
    h, w = cfg.height, cfg.width
    h4, w4 = cfg.grid(STRIDES[0])
    seg = lane_mask(lanes, (h4, w4), cfg.seg_thickness, scale=STRIDES[0])
    label = render_hough_label(lanes, cfg.label_spec, cfg.splat_radius, cfg.sample_count, cfg.bottom_fraction)
    line = render_line_map(label.peaks, cfg.label_spec, (h4, w4), cfg.line_thickness)
    loc = np.stack([lane_mask([ln], (h, w), cfg.location_thickness) for ln in lanes]) if len(lanes) else \
        np.zeros((0, h, w), np.float32)
    rows = np.zeros((len(lanes), h), dtype=np.int64)
    for i, ln in enumerate(lanes):
        y0, y1 = ln.y_range
        rows[i, math.ceil(y0):math.floor(y1) + 1] = 1
    order = sorted(range(len(lanes)), key=lambda i: lanes[i].xs[-1])
    return Targets(torch.from_numpy(seg), torch.from_numpy(label.map.astype(np.float32)), label.peaks,
                   torch.from_numpy(line.astype(np.float32)), torch.from_numpy(loc), torch.from_numpy(rows), order)


def scene_loss(model: ToyHoughLaneNet, out: ToyOutput, b: int, tgt: Targets) -> dict[str, torch.Tensor]:
    cfg = model.cfg
    wts = cfg.weights
    terms = {"multi": L.multiscale_bce(out.seg[b], tgt.seg)}
    n = tgt.n_lanes
    if out.hough_map is not None:
        if n > 0:
            terms["hough"] = L.hough_focal(out.hough_map[b], tgt.hough, n, wts.alpha, wts.beta)
        if out.line_map is not None:
            terms["line"] = L.rht_line_loss(out.line_map[b], tgt.line)
    else:
        exist = torch.zeros(cfg.max_lanes, dtype=out.slot_exist.dtype)
        exist[: min(n, cfg.max_lanes)] = 1.0
        terms["hough"] = L.multiscale_bce(out.slot_exist[b], exist)
    if n > 0:
        if out.slot_vecs is not None:
            order = tgt.slot_order[: cfg.max_lanes]
            vecs = model.instance_vectors(out, b, slots=range(len(order)))
            loc_t, row_t = tgt.loc[order], tgt.rows[order]
        else:
            vecs = model.instance_vectors(out, b, peaks=tgt.peaks)
            loc_t, row_t = tgt.loc, tgt.rows
        logits, rows = model.instances(out, b, vecs)
        terms["loc"] = L.location_loss(torch.sigmoid(logits), loc_t.to(logits.dtype), wts.positive_weight)
        terms["range"] = L.range_loss(rows, row_t)
    return terms


# --------------------------------------------------------------------------
# training


def _training_sample(entry: list, cfg: PipelineConfig, rng: np.random.Generator):
    image, lanes, tgt, flipped = entry
    if not cfg.augment:
        return torch.from_numpy(image)[None, None], tgt
    if rng.random() < 0.5:
        if flipped is None:
            flipped = entry[3] = make_targets(lanes.flipped(cfg.width), cfg)
        image, tgt = image[:, ::-1], flipped
    img = image * rng.uniform(0.8, 1.2) + rng.uniform(-0.1, 0.1)
    img = img + rng.normal(0.0, 0.02, img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return torch.from_numpy(img)[None, None], tgt


@dataclass
class TrainResult:
    model: ToyHoughLaneNet
    trace: list[dict]

    @property
    def final_accuracy(self) -> float:
        return self.trace[-1]["accuracy"]


def set_deterministic(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


def evaluate(model: ToyHoughLaneNet, scenes: Sequence[SyntheticScene]) -> EvalResult:
    cfg = model.cfg
    results = []
    for i, sc in enumerate(scenes):
        x = torch.from_numpy(sc.image)[None, None]
        pred = model.predict(x)[0]
        gt = TuSimpleRecord.from_laneset(f"scene_{i}", sc.lanes, cfg.h_samples)
        results.append(tusimple_accuracy(pred, gt, cfg.accuracy_px))
    return merge(results)


def eval_scenes(cfg: PipelineConfig, count: int | None = None) -> list[SyntheticScene]:
    return list(scene_stream(cfg.seed, count or cfg.eval_scenes, cfg.difficulty, stream=1,
                             width=cfg.width, height=cfg.height, max_lanes=cfg.max_lanes,
                             spec=cfg.scene_spec))


def train_toy(dataset: Iterable[SyntheticScene] | None, cfg: PipelineConfig, epochs: int,
              n_scenes: int = 200, eval_set: Sequence[SyntheticScene] | None = None,
              log: Callable[[dict], None] | None = None, deterministic: bool = True,
              step_log: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam on per-scene losses; one trace row (mean loss terms + accuracy) per epoch.

    ``dataset=None`` streams ``n_scenes`` synthetic scenes from ``cfg.seed``
    through a background generator. Row 0 of the trace is the untrained model.
    ``step_log`` receives every step's loss breakdown.
    """
    if deterministic:
        set_deterministic()
    torch.manual_seed(cfg.seed)
    model = ToyHoughLaneNet(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = None
    if dataset is None:
        dataset = prefetch(lambda: scene_stream(cfg.seed, n_scenes, cfg.difficulty, width=cfg.width,
                                                height=cfg.height, max_lanes=cfg.max_lanes,
                                                spec=cfg.scene_spec))
    eval_set = eval_scenes(cfg) if eval_set is None else eval_set
    rng = np.random.default_rng(cfg.seed)

    # per scene: (image, targets, mirrored targets); mirrored ones built lazily
    cache: list[list] = []
    source = iter(dataset)
    model.eval()
    trace = [{"epoch": 0, "accuracy": evaluate(model, eval_set).accuracy}]
    step = 0
    if log:
        log(trace[-1])
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        model.train()
        if source is not None:
            for sc in source:
                cache.append([sc.image, sc.lanes, make_targets(sc.lanes, cfg), None])
            source = None
        if sched is None and cfg.lr_schedule == "cosine":
            sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=epochs * len(cache))
        sums: dict[str, float] = {}
        counts: dict[str, int] = {}
        for k in rng.permutation(len(cache)):
            x, tgt = _training_sample(cache[k], cfg, rng)
            out = model(x)
            terms = scene_loss(model, out, 0, tgt)
            try:
                total = L.total_loss(terms, cfg.weights)
            except L.LossPoisonedError as exc:
                raise RuntimeError(f"training diverged at epoch {epoch}: {exc}") from exc
            opt.zero_grad()
            total.backward()
            opt.step()
            if sched is not None:
                sched.step()
            parts = L.breakdown(terms, cfg.weights)
            if step_log:
                step_log({"epoch": epoch, "step": step, **parts})
            step += 1
            for name, v in parts.items():
                sums[name] = sums.get(name, 0.0) + v
                counts[name] = counts.get(name, 0) + 1
        model.eval()
        row = {"epoch": epoch, **{k: sums[k] / counts[k] for k in sums},
               "accuracy": evaluate(model, eval_set).accuracy, "seconds": time.perf_counter() - t0}
        trace.append(row)
        if log:
            log(row)
    return TrainResult(model, trace)


# --------------------------------------------------------------------------
# checkpoints


def save_model(path, model: ToyHoughLaneNet) -> None:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    save_checkpoint(path, tensors, model.cfg.to_dict())


def load_model(path, expect: PipelineConfig | None = None) -> ToyHoughLaneNet:
    tensors, cfg_dict = load_checkpoint(path, None if expect is None else expect.to_dict())
    model = ToyHoughLaneNet(PipelineConfig.from_dict(cfg_dict))
    state = model.state_dict()
    missing = set(state) - set(tensors)
    extra = set(tensors) - set(state)
    if missing or extra:
        raise FormatError(f"checkpoint tensors do not match the model: missing {sorted(missing)}, "
                          f"unexpected {sorted(extra)}")
    for k, v in tensors.items():
        if tuple(v.shape) != tuple(state[k].shape):
            raise FormatError(f"tensor {k!r}: shape {v.shape} != model {tuple(state[k].shape)}")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return model
