"""MMED dataset files: header, four shape records, then packed f32 frames.

Layout (little endian)::

    b"MMED" | version u32 | frame count u64 |
    4 x (rank u8, dims u32 * rank)          # x1, x2, x3, x4
    frames: x1 x2 x3 x4 payloads (f32), y (f32)

Files are memory-mapped on load so paper-sized sets do not need to fit in RAM.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .simworld import PAPER_RIG, GenConfig, World, simulate, steering_bins

MAGIC = b"MMED"
VERSION = 1


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x1: np.ndarray  # (N, 3, H, W)
    x2: np.ndarray
    x3: np.ndarray
    x4: np.ndarray  # (N, 2, rows, cols)
    y: np.ndarray  # (N,)

    def __len__(self):
        return len(self.y)

    @property
    def shapes(self):
        return tuple(a.shape[1:] for a in (self.x1, self.x2, self.x3, self.x4))

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.x1[idx], self.x2[idx], self.x3[idx], self.x4[idx], self.y[idx])

    def batch(self, idx):
        """Tuple (x1, x2, x3, x4, y) of in-memory float32 arrays."""
        idx = np.asarray(idx)
        order = np.argsort(idx, kind="stable")
        inv = np.empty_like(order)
        inv[order] = np.arange(len(order))
        sorted_idx = idx[order]
        arrs = [np.asarray(a[sorted_idx], dtype=np.float32)[inv] for a in (self.x1, self.x2, self.x3, self.x4)]
        return (*arrs, np.asarray(self.y[idx], dtype=np.float32))


def _frame_dtype(shapes):
    return np.dtype([("x1", "<f4", shapes[0]), ("x2", "<f4", shapes[1]), ("x3", "<f4", shapes[2]),
                     ("x4", "<f4", shapes[3]), ("y", "<f4")])


def _header(count, shapes):
    out = [MAGIC, struct.pack("<IQ", VERSION, count)]
    for shp in shapes:
        out.append(struct.pack("<B", len(shp)))
        out.append(struct.pack(f"<{len(shp)}I", *shp))
    return b"".join(out)


class DatasetWriter:
    """Streams frames to disk; the frame count is fixed up front."""

    def __init__(self, path, count, shapes):
        self.path = Path(path)
        self.count = count
        self.shapes = tuple(tuple(s) for s in shapes)
        self.dtype = _frame_dtype(self.shapes)
        self._f = open(self.path, "wb")
        self._f.write(_header(count, self.shapes))
        self.written = 0

    def write(self, x1, x2, x3, x4, y):
        rec = np.zeros((), dtype=self.dtype)
        rec["x1"], rec["x2"], rec["x3"], rec["x4"], rec["y"] = x1, x2, x3, x4, y
        self._f.write(rec.tobytes())
        self.written += 1

    def close(self):
        self._f.close()
        if self.written != self.count:
            raise DataFormatError(f"{self.path}: wrote {self.written} of {self.count} frames")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *exc):
        if exc_type is None:
            self.close()
        else:
            self._f.close()


def save_dataset(path, data: Dataset):
    with DatasetWriter(path, len(data), data.shapes) as w:
        for i in range(len(data)):
            w.write(data.x1[i], data.x2[i], data.x3[i], data.x4[i], data.y[i])


def read_header(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) < 4 or head[:4] != MAGIC:
            raise DataFormatError(f"{path}: not an MMED dataset (magic {head[:4]!r})")
        if len(head) < 16:
            raise DataFormatError(f"{path}: truncated header")
        version, count = struct.unpack("<IQ", head[4:16])
        if version != VERSION:
            raise DataFormatError(f"{path}: unsupported version {version}")
        shapes = []
        for _ in range(4):
            r = f.read(1)
            if not r:
                raise DataFormatError(f"{path}: truncated shape records")
            rank = r[0]
            raw = f.read(4 * rank)
            if len(raw) != 4 * rank:
                raise DataFormatError(f"{path}: truncated shape records")
            shapes.append(tuple(struct.unpack(f"<{rank}I", raw)))
        return count, tuple(shapes), f.tell()


def load_dataset(path, mmap=True) -> Dataset:
    path = Path(path)
    count, shapes, offset = read_header(path)
    dtype = _frame_dtype(shapes)
    expected = offset + count * dtype.itemsize
    size = path.stat().st_size
    if size != expected:
        raise DataFormatError(f"{path}: size {size} bytes, expected {expected} for {count} frames")
    if count == 0:
        recs = np.zeros(0, dtype=dtype)
    elif mmap:
        recs = np.memmap(path, dtype=dtype, mode="r", offset=offset, shape=(count,))
    else:
        recs = np.fromfile(path, dtype=dtype, count=count, offset=offset)
    return Dataset(recs["x1"], recs["x2"], recs["x3"], recs["x4"], recs["y"])


def generate_dataset(world_spec, path, cfg: GenConfig, rig=PAPER_RIG):
    """Simulate the expert driver and write ``cfg.frames`` frames to ``path``.

    Returns (per-frame log, 7-bin histogram).
    """
    world = World(world_spec)
    shapes = ((3,) + rig.image_hw,) * 3 + ((2, rig.lidar_rows, rig.lidar_beams),)
    with DatasetWriter(path, cfg.frames, shapes) as w:
        log = simulate(world, cfg, rig, on_frame=lambda i, a, b, c, d, y, info: w.write(a, b, c, d, y))
    hist = np.bincount(steering_bins([r["steer"] for r in log]), minlength=7)
    return log, hist
