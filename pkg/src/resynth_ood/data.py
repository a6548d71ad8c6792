"""Procedural shape datasets: in-distribution classes plus held-out OOD shapes."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError
from .kvconfig import dumps_kv, from_flat, loads_kv, to_flat
from .rng import RngStream

SHAPES = ("disk", "square", "triangle", "cross", "ring", "star", "diamond")
SPLITS = ("train", "val", "test")
IND, OOD = 0, 1

MAGIC = b"RSOODDS\x00"
VERSION = 1
SUPERSAMPLE = 4


@dataclass(frozen=True)
class ShapeClass:
    id: int
    name: str


@dataclass
class Jitter:
    scale: tuple[float, float] = (0.33, 0.40)  # half-extent as a fraction of side
    offset: float = 1.0  # fraction of the free margin the centre may move
    rotation_deg: float = 15.0
    fg: tuple[float, float] = (0.75, 1.0)
    bg: tuple[float, float] = (0.0, 0.15)


@dataclass
class DatasetSpec:
    image_side: int = 16
    channels: int = 1
    ind_classes: tuple[str, ...] = ("disk", "square", "triangle", "cross")
    ood_classes: tuple[str, ...] = ("ring", "star")
    train_per_class: int = 500
    val_per_class: int = 100
    test_per_class: int = 100
    jitter: Jitter = field(default_factory=Jitter)
    seed: int = 0

    def validate(self) -> None:
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        for name in self.ind_classes + self.ood_classes:
            if name not in SHAPES:
                raise ConfigError(f"unknown shape {name!r}; choose from {SHAPES}")
        overlap = set(self.ind_classes) & set(self.ood_classes)
        if overlap:
            raise ConfigError(f"InD and OOD classes overlap: {sorted(overlap)}")
        if len(set(self.ind_classes)) != len(self.ind_classes):
            raise ConfigError("duplicate InD class")
        for name in ("train_per_class", "val_per_class", "test_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        lo, hi = self.jitter.scale
        if not 0 < lo <= hi < 0.5:
            raise ConfigError("jitter.scale must satisfy 0 < lo <= hi < 0.5")
        if 2 * lo * self.image_side < 3:
            raise ConfigError(
                f"shapes would be smaller than 3 px at side {self.image_side} "
                f"(min extent {2 * lo * self.image_side:.2f} px)"
            )
        for name in ("fg", "bg"):
            a, b = getattr(self.jitter, name)
            if not 0.0 <= a <= b <= 1.0:
                raise ConfigError(f"jitter.{name} must lie in [0, 1]")
        if self.jitter.bg[1] >= self.jitter.fg[0]:
            raise ConfigError("background and foreground intensity ranges overlap")

    @property
    def classes(self) -> list[ShapeClass]:
        names = self.ind_classes + self.ood_classes
        return [ShapeClass(i, n) for i, n in enumerate(names)]

    @property
    def num_ind(self) -> int:
        return len(self.ind_classes)

    def per_split(self, split: str) -> int:
        return getattr(self, f"{split}_per_class")

    def to_text(self) -> str:
        return dumps_kv(to_flat(self))

    @classmethod
    def from_text(cls, text: str) -> "DatasetSpec":
        return from_flat(cls, loads_kv(text))


# ---------------------------------------------------------------- rasterizer


def _polygon_mask(u: np.ndarray, v: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test, vectorised over sample points."""
    inside = np.zeros(u.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        crosses = (y1 > v) != (y2 > v)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = (x2 - x1) * (v - y1) / (y2 - y1) + x1
        inside ^= crosses & (u < x_at)
    return inside


def _star_vertices(points: int = 5, inner: float = 0.45, outer: float = 1.05) -> np.ndarray:
    ang = np.pi / 2 + np.pi * np.arange(2 * points) / points
    rad = np.where(np.arange(2 * points) % 2 == 0, outer, inner * outer)
    # centre the bounding box vertically
    pts = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    pts[:, 1] -= (pts[:, 1].max() + pts[:, 1].min()) / 2
    return pts


_TRIANGLE = np.array([[0.0, 0.95], [-1.0, -0.95], [1.0, -0.95]])
_STAR = _star_vertices()


def shape_membership(name: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Inside-test in unit shape coordinates (half-extent 1, y up)."""
    if name == "disk":
        return u * u + v * v <= 1.0
    if name == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.55**2)
    if name == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.9
    if name == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if name == "cross":
        arm = 0.33
        return ((np.abs(u) <= arm) & (np.abs(v) <= 1.0)) | (
            (np.abs(v) <= arm) & (np.abs(u) <= 1.0)
        )
    if name == "triangle":
        return _polygon_mask(u, v, _TRIANGLE)
    if name == "star":
        return _polygon_mask(u, v, _STAR)
    raise ConfigError(f"unknown shape {name!r}")


def rasterize(name: str, side: int, cx: float, cy: float, half: float,
              angle: float = 0.0, supersample: int = SUPERSAMPLE) -> np.ndarray:
    """Coverage in [0, 1] of each pixel, estimated on a regular sub-pixel grid.

    Pixel (i, j) spans [j, j+1) x [i, i+1); centre coordinates are in pixels.
    """
    s = supersample
    offs = (np.arange(s) + 0.5) / s
    ys = (np.arange(side)[:, None] + offs[None, :]).reshape(-1)
    xs = ys.copy()
    X, Y = np.meshgrid(xs, ys)
    dx, dy = X - cx, -(Y - cy)
    c, sn = math.cos(angle), math.sin(angle)
    u = (c * dx + sn * dy) / half
    v = (-sn * dx + c * dy) / half
    inside = shape_membership(name, u, v).astype(np.float64)
    return inside.reshape(side, s, side, s).mean(axis=(1, 3))


def generate_image(shape: ShapeClass | str, rng: RngStream, side: int = 16,
                   channels: int = 1, jitter: Jitter | None = None) -> np.ndarray:
    """Render one jittered shape as a (channels, side, side) float32 array."""
    name = shape.name if isinstance(shape, ShapeClass) else shape
    jitter = jitter or Jitter()
    lo, hi = jitter.scale
    if 2 * lo * side < 3:
        raise ConfigError(f"shape {name!r} is smaller than 3 px at side {side}")
    g = rng.generator
    half = side * g.uniform(lo, hi)
    margin = max(side / 2 - half * _extent(name), 0.0)
    cx = side / 2 + jitter.offset * margin * g.uniform(-1, 1)
    cy = side / 2 + jitter.offset * margin * g.uniform(-1, 1)
    angle = math.radians(jitter.rotation_deg) * g.uniform(-1, 1)
    if name in ("disk", "ring"):
        angle = 0.0
    fg = g.uniform(*jitter.fg, size=channels)
    bg = g.uniform(*jitter.bg, size=channels)
    cov = rasterize(name, side, cx, cy, half, angle)
    img = bg[:, None, None] + (fg - bg)[:, None, None] * cov[None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _extent(name: str) -> float:
    # radius of the bounding circle in unit coordinates, rotation-safe
    return {"square": 0.9 * math.sqrt(2), "cross": math.hypot(1.0, 0.33),
            "triangle": math.hypot(1.0, 0.95), "star": 1.05}.get(name, 1.0)


# ---------------------------------------------------------------- datasets


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    label: int
    split: str
    distribution: str


@dataclass
class Dataset:
    spec: DatasetSpec
    pixels: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int32 class id
    splits: np.ndarray  # (N,) uint8 index into SPLITS
    dists: np.ndarray  # (N,) uint8, 0 = InD, 1 = OOD

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[LabeledImage]:
        for i in range(len(self)):
            yield LabeledImage(self.pixels[i], int(self.labels[i]),
                               SPLITS[self.splits[i]],
                               "OOD" if self.dists[i] else "InD")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.spec == other.spec
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("pixels", "labels", "splits", "dists"))
                and self.pixels.dtype == other.pixels.dtype)

    def select(self, split: str, dist: int | None = None) -> "Dataset":
        keep = self.splits == SPLITS.index(split)
        if dist is not None:
            keep &= self.dists == dist
        return Dataset(self.spec, self.pixels[keep], self.labels[keep],
                       self.splits[keep], self.dists[keep])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.spec, self.pixels[idx], self.labels[idx],
                       self.splits[idx], self.dists[idx])

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self))

    def mean_pixel(self) -> float:
        return float(self.pixels.mean())


def generate_dataset(spec: DatasetSpec) -> Dataset:
    spec.validate()
    root = RngStream(spec.seed, ("data",))
    pixels, labels, splits, dists = [], [], [], []
    for split_idx, split in enumerate(SPLITS):
        n = spec.per_split(split)
        for cls in spec.classes:
            is_ood = cls.id >= spec.num_ind
            if is_ood and split != "test":
                continue
            for k in range(n):
                stream = root.split(split, cls.name, k)
                pixels.append(generate_image(cls, stream, spec.image_side,
                                             spec.channels, spec.jitter))
                labels.append(cls.id)
                splits.append(split_idx)
                dists.append(OOD if is_ood else IND)
    return Dataset(spec, np.stack(pixels).astype(np.float32),
                   np.asarray(labels, np.int32), np.asarray(splits, np.uint8),
                   np.asarray(dists, np.uint8))


# ---------------------------------------------------------------- file format
#
# magic(8) | version u32 | spec_len u32 | spec text (utf-8) |
# n u32 | c u32 | h u32 | w u32 | pixels f32le[n*c*h*w] |
# labels i32le[n] | splits u8[n] | dists u8[n]


def dataset_to_bytes(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    spec_txt = ds.spec.to_text().encode("utf-8")
    n, c, h, w = ds.pixels.shape
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(spec_txt)))
    buf.write(spec_txt)
    buf.write(struct.pack("<IIII", n, c, h, w))
    buf.write(ds.pixels.astype("<f4").tobytes())
    buf.write(ds.labels.astype("<i4").tobytes())
    buf.write(ds.splits.astype("u1").tobytes())
    buf.write(ds.dists.astype("u1").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated file: need {n} bytes for {what}, "
                f"{len(self.data) - self.pos} available", offset=self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def dataset_from_bytes(data: bytes) -> Dataset:
    r = _Reader(data)
    if not data:
        raise FormatError("empty dataset file", offset=0)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"magic mismatch: expected {MAGIC!r}, got {magic!r}", offset=0)
    version, spec_len = struct.unpack("<II", r.take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}", offset=len(MAGIC))
    spec_off = r.pos
    try:
        spec = DatasetSpec.from_text(r.take(spec_len, "spec").decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise FormatError(f"corrupted spec block: {exc}", offset=spec_off) from exc
    n, c, h, w = struct.unpack("<IIII", r.take(16, "shape"))
    pixels = np.frombuffer(r.take(4 * n * c * h * w, "pixels"), "<f4").reshape(n, c, h, w)
    labels = np.frombuffer(r.take(4 * n, "labels"), "<i4")
    splits = np.frombuffer(r.take(n, "splits"), "u1")
    dists = np.frombuffer(r.take(n, "dists"), "u1")
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes", offset=r.pos)
    return Dataset(spec, pixels.astype(np.float32), labels.astype(np.int32),
                   splits.copy(), dists.copy())


def save_dataset(ds: Dataset, path: str | Path) -> None:
    from .io_utils import atomic_write_bytes

    atomic_write_bytes(path, dataset_to_bytes(ds))


def load_dataset(path: str | Path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
