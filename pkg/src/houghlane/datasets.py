"""TuSimple and CULane annotation formats.

TuSimple files are JSON lines with ``raw_file``, ``h_samples`` and ``lanes``
(x per h_sample, -2 where the lane is absent). CULane stores one
``<image>.lines.txt`` per image with one lane per line as ``x y x y ...``,
listed bottom-up.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import jsonschema
import numpy as np

from .geometry import LanePolyline, LaneSet

ABSENT = -2

TUSIMPLE_SIZE = (1280, 720)
CULANE_SIZE = (1640, 590)


class AnnotationError(ValueError):
    pass


@dataclass
class TuSimpleRecord:
    raw_file: str
    h_samples: list
    lanes: list
    run_time: float | None = None

    def __post_init__(self):
        hs = np.asarray(self.h_samples, dtype=np.float64)
        if hs.size and np.any(np.diff(hs) <= 0):
            raise AnnotationError(f"{self.raw_file}: h_samples must be strictly increasing")
        for i, lane in enumerate(self.lanes):
            # prediction files may omit h_samples; rows are then aligned to the ground truth
            if self.h_samples and len(lane) != len(self.h_samples):
                raise AnnotationError(
                    f"{self.raw_file}: lane {i} has {len(lane)} entries for {len(self.h_samples)} h_samples"
                )

    def to_laneset(self) -> LaneSet:
        """Lanes with at least two present points; absent (-2) entries dropped."""
        hs = np.asarray(self.h_samples, dtype=np.float64)
        lanes = []
        for i, xs in enumerate(self.lanes):
            xs = np.asarray(xs, dtype=np.float64)
            ok = xs >= 0
            if ok.sum() >= 2:
                lanes.append(LanePolyline.from_xy(xs[ok], hs[ok], id=i))
        return LaneSet(lanes)

    def to_json(self) -> dict:
        out = {"raw_file": self.raw_file, "lanes": self.lanes, "h_samples": self.h_samples}
        if self.run_time is not None:
            out["run_time"] = self.run_time
        return out

    @classmethod
    def from_laneset(cls, raw_file: str, lanes: LaneSet | Iterable[LanePolyline], h_samples: Sequence,
                     run_time: float | None = None) -> "TuSimpleRecord":
        """Sample each lane at ``h_samples``; rows outside a lane's extent get -2."""
        rows = [sample_lane(ln, h_samples) for ln in lanes]
        return cls(raw_file, list(h_samples), rows, run_time)


def sample_lane(lane: LanePolyline, h_samples: Sequence) -> list:
    xs = lane.x_at(np.asarray(h_samples, dtype=np.float64))
    return [ABSENT if math.isnan(x) else float(x) for x in xs]


TUSIMPLE_SCHEMA = {
    "type": "object",
    "required": ["raw_file", "lanes", "h_samples"],
    "properties": {
        "raw_file": {"type": "string", "minLength": 1},
        "h_samples": {"type": "array", "items": {"type": "number"}},
        "lanes": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "run_time": {"type": "number", "minimum": 0},
    },
}

TUSIMPLE_PRED_SCHEMA = {
    **TUSIMPLE_SCHEMA,
    "required": ["raw_file", "lanes", "run_time"],
}


def validate_tusimple(obj: dict, prediction: bool = False) -> None:
    """Raise ``AnnotationError`` unless ``obj`` is a well-formed TuSimple line."""
    try:
        jsonschema.validate(obj, TUSIMPLE_PRED_SCHEMA if prediction else TUSIMPLE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise AnnotationError(exc.message) from exc
    n = len(obj.get("h_samples", [])) if "h_samples" in obj else None
    for i, lane in enumerate(obj["lanes"]):
        if n is not None and len(lane) != n:
            raise AnnotationError(f"lane {i}: {len(lane)} entries for {n} h_samples")
        if any(x < 0 and x != ABSENT for x in lane):
            raise AnnotationError(f"lane {i}: negative x other than {ABSENT}")


def parse_tusimple(stream: str | Iterable[str], prediction: bool = False) -> list[TuSimpleRecord]:
    """Records from JSON lines; ``prediction`` applies the submission schema (``run_time`` required)."""
    lines = stream.splitlines() if isinstance(stream, str) else stream
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise AnnotationError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
        try:
            validate_tusimple(obj, prediction)
            records.append(TuSimpleRecord(obj["raw_file"], obj.get("h_samples", []), obj["lanes"],
                                          obj.get("run_time")))
        except AnnotationError as exc:
            raise AnnotationError(f"line {lineno}: {exc}") from exc
    return records


def export_tusimple(records: Iterable[TuSimpleRecord]) -> str:
    return "".join(json.dumps(r.to_json()) + "\n" for r in records)


def read_tusimple(path: str | Path, prediction: bool = False) -> list[TuSimpleRecord]:
    with open(path) as fh:
        return parse_tusimple(fh, prediction)


# --------------------------------------------------------------------------


@dataclass
class CULaneRecord:
    image_path: str
    lanes: list[np.ndarray] = field(default_factory=list)  # each (K, 2), y increasing

    def __post_init__(self):
        for i, ln in enumerate(self.lanes):
            if len(ln) < 2:
                raise AnnotationError(f"{self.image_path}: lane {i} has fewer than 2 points")

    def to_laneset(self) -> LaneSet:
        return LaneSet([LanePolyline(pts, id=i) for i, pts in enumerate(self.lanes)])

    @classmethod
    def from_laneset(cls, image_path: str, lanes: Iterable[LanePolyline]) -> "CULaneRecord":
        return cls(image_path, [ln.points.copy() for ln in lanes])


def parse_culane(lines_txt: str, image_path: str = "") -> CULaneRecord:
    lanes = []
    for lineno, line in enumerate(lines_txt.splitlines(), 1):
        toks = line.split()
        if not toks:
            continue
        if len(toks) % 2:
            raise AnnotationError(f"line {lineno}: odd number of coordinates ({len(toks)})")
        try:
            vals = np.array([float(t) for t in toks], dtype=np.float64).reshape(-1, 2)
        except ValueError as exc:
            raise AnnotationError(f"line {lineno}: {exc}") from exc
        vals = vals[np.argsort(vals[:, 1], kind="stable")]
        _, first = np.unique(vals[:, 1], return_index=True)
        vals = vals[np.sort(first)]
        if len(vals) < 2:
            raise AnnotationError(f"line {lineno}: lane needs at least 2 distinct rows")
        lanes.append(vals)
    return CULaneRecord(image_path, lanes)


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def export_culane(record: CULaneRecord) -> str:
    """Lines text in CULane order (bottom-up, i.e. decreasing y)."""
    out = []
    for pts in record.lanes:
        out.append(" ".join(f"{_fmt(x)} {_fmt(y)}" for x, y in pts[::-1]))
    return "".join(line + "\n" for line in out)


_CULANE_LINE = re.compile(r"^\s*(?:[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?\s+){3,}[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?\s*$")


def validate_culane(text: str) -> None:
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if not _CULANE_LINE.match(line) or len(line.split()) % 2:
            raise AnnotationError(f"line {lineno}: not a list of 'x y' pairs: {line!r}")


def read_culane(path: str | Path) -> CULaneRecord:
    path = Path(path)
    name = path.name
    image = str(path.with_name(name[: -len(".lines.txt")] + ".jpg")) if name.endswith(".lines.txt") else str(path)
    return parse_culane(path.read_text(), image)


def culane_lines_path(image_path: str | Path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + ".lines.txt")
