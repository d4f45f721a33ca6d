"""On-disk formats: HMAP float grids, PNG previews, HLWT checkpoints, JSON-lines traces.

HMAP: ``b"HMAP"``, uint32 Theta, uint32 R, uint32 reserved (0), then
Theta*R little-endian float32 values, row-major (theta rows, r columns).

HLWT: ``b"HLWT"``, uint16 version, uint16 reserved, 32-byte sha256 of the
canonical config JSON, uint32 length + config JSON, uint32 tensor count, then
per tensor: uint16 name length + UTF-8 name, uint8 dtype code, uint8 ndim,
ndim x uint32 dims, uint64 byte count, little-endian raw data.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image

HMAP_MAGIC = b"HMAP"
HLWT_MAGIC = b"HLWT"
HLWT_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("<i4"), 4: np.dtype("u1")}
_CODES = {(d.kind, d.itemsize): k for k, d in _DTYPES.items()}


class FormatError(ValueError):
    pass


# -- HMAP ----------------------------------------------------------------


def hmap_bytes(grid: np.ndarray) -> bytes:
    g = np.asarray(grid)
    if g.ndim != 2:
        raise ValueError(f"HMAP stores 2-D grids, got shape {g.shape}")
    t, r = g.shape
    return HMAP_MAGIC + struct.pack("<III", t, r, 0) + np.ascontiguousarray(g, dtype="<f4").tobytes()


def hmap_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 16 or data[:4] != HMAP_MAGIC:
        raise FormatError("not an HMAP file (bad magic)")
    t, r, _ = struct.unpack("<III", data[4:16])
    body = data[16:]
    if len(body) != 4 * t * r:
        raise FormatError(f"HMAP body is {len(body)} bytes, header says {t}x{r} float32")
    return np.frombuffer(body, dtype="<f4").reshape(t, r).astype(np.float32)


def write_hmap(path: str | Path, grid: np.ndarray) -> None:
    Path(path).write_bytes(hmap_bytes(grid))


def read_hmap(path: str | Path) -> np.ndarray:
    return hmap_from_bytes(Path(path).read_bytes())


# -- PNG -----------------------------------------------------------------


def to_uint8(grid: np.ndarray, normalize: bool = False) -> np.ndarray:
    """[0, 1] -> 0..255 with rounding; ``normalize`` rescales by the grid maximum first."""
    g = np.asarray(grid, dtype=np.float64)
    if normalize:
        m = g.max() if g.size else 0.0
        g = g / m if m > 0 else np.zeros_like(g)
    return np.round(np.clip(g, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: str | Path, grid: np.ndarray, normalize: bool = False) -> None:
    g = np.asarray(grid)
    img = g if g.dtype == np.uint8 else to_uint8(g, normalize)
    Image.fromarray(img, mode="L").save(path)


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def overlay(image: np.ndarray, lanes, value: int = 255) -> np.ndarray:
    """Grayscale image with each lane burned in, one pixel per image row it spans."""
    out = to_uint8(image) if np.asarray(image).dtype != np.uint8 else np.array(image)
    h, w = out.shape
    for ln in lanes:
        y0, y1 = ln.y_range
        ys = np.arange(max(math.ceil(y0), 0), min(math.floor(y1), h - 1) + 1)
        xs = np.round(ln.x_at(ys))
        ok = (xs >= 0) & (xs < w)
        out[ys[ok], xs[ok].astype(int)] = value
    return out


# -- HLWT ----------------------------------------------------------------


def config_json(config: Mapping) -> bytes:
    return json.dumps(config, sort_keys=True, separators=(",", ":")).encode()


def config_hash(config: Mapping) -> bytes:
    return hashlib.sha256(config_json(config)).digest()


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], config: Mapping) -> None:
    buf = io.BytesIO()
    cfg = config_json(config)
    buf.write(HLWT_MAGIC + struct.pack("<HH", HLWT_VERSION, 0) + hashlib.sha256(cfg).digest())
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        a = np.asarray(arr)
        code = _CODES.get((a.dtype.kind, a.dtype.itemsize))
        if code is None:
            raise ValueError(f"tensor {name!r}: unsupported dtype {a.dtype}")
        data = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape) + struct.pack("<Q", len(data)) + data)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path, expect_config: Mapping | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Tensors and config; raises ``FormatError`` on corruption or a config mismatch."""
    data = Path(path).read_bytes()
    if data[:4] != HLWT_MAGIC:
        raise FormatError("not an HLWT checkpoint (bad magic)")
    try:
        version, _ = struct.unpack_from("<HH", data, 4)
        if version != HLWT_VERSION:
            raise FormatError(f"unsupported HLWT version {version}")
        digest = data[8:40]
        (n,) = struct.unpack_from("<I", data, 40)
        off = 44
        cfg_raw = data[off:off + n]
        off += n
        if hashlib.sha256(cfg_raw).digest() != digest:
            raise FormatError("config hash does not match embedded config")
        config = json.loads(cfg_raw)
        if expect_config is not None and config_hash(expect_config) != digest:
            raise FormatError("checkpoint was written for a different config")
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + ln].decode()
            off += ln
            code, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", data, off)
            off += 8
            if code not in _DTYPES or off + nbytes > len(data):
                raise FormatError(f"tensor {name!r}: truncated or bad dtype code {code}")
            tensors[name] = np.frombuffer(data[off:off + nbytes], dtype=_DTYPES[code]).reshape(shape).copy()
            off += nbytes
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from exc
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after tensor table")
    return tensors, config


# -- JSON lines ----------------------------------------------------------


def append_jsonl(path: str | Path, row: Mapping) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(dict(row), sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_jsonl(path: str | Path, rows: Iterable[Mapping]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(dict(row), sort_keys=True) + "\n")
