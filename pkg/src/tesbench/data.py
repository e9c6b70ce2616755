"""Procedural glyph domains standing in for a large-scale transfer benchmark.

A domain is a seeded recipe: an ordered list of stroke glyphs (one per
class) plus a rendering style. The source domain carries 10 classes;
target domains carry 5, of which 3 reuse source glyphs and 2 are novel,
so the label spaces never agree. Rendering is a pure function of
(glyph, style, rng stream), with streams keyed by (seed, split, class,
index), so datasets are bit-reproducible and order-independent.
"""

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .rng import philox

IMG_SIZE = 16
STROKE_LEVEL = 0.60
BG_LEVEL = 0.40
_BG_TEXTURE_AMPLITUDE = 0.05
_ANTIALIAS_PX = 1.0

# glyph geometry in unit coordinates: list of segments (x1,y1,x2,y2) plus
# optional circles (cx,cy,r)
_S = {
    "plus": [(0.5, 0.15, 0.5, 0.85), (0.15, 0.5, 0.85, 0.5)],
    "cross": [(0.2, 0.2, 0.8, 0.8), (0.2, 0.8, 0.8, 0.2)],
    "square": [
        (0.2, 0.2, 0.8, 0.2),
        (0.8, 0.2, 0.8, 0.8),
        (0.8, 0.8, 0.2, 0.8),
        (0.2, 0.8, 0.2, 0.2),
    ],
    "diamond": [
        (0.5, 0.14, 0.86, 0.5),
        (0.86, 0.5, 0.5, 0.86),
        (0.5, 0.86, 0.14, 0.5),
        (0.14, 0.5, 0.5, 0.14),
    ],
    "triangle": [
        (0.5, 0.15, 0.84, 0.8),
        (0.84, 0.8, 0.16, 0.8),
        (0.16, 0.8, 0.5, 0.15),
    ],
    "circle": [],
    "vee": [(0.2, 0.25, 0.5, 0.8), (0.5, 0.8, 0.8, 0.25)],
    "zigzag": [(0.2, 0.2, 0.8, 0.2), (0.8, 0.2, 0.2, 0.8), (0.2, 0.8, 0.8, 0.8)],
    "tee": [(0.2, 0.2, 0.8, 0.2), (0.5, 0.2, 0.5, 0.85)],
    "ell": [(0.27, 0.15, 0.27, 0.8), (0.27, 0.8, 0.8, 0.8)],
    "star": [
        (0.5, 0.15, 0.5, 0.85),
        (0.2, 0.325, 0.8, 0.675),
        (0.2, 0.675, 0.8, 0.325),
    ],
    "hourglass": [
        (0.22, 0.2, 0.78, 0.2),
        (0.78, 0.2, 0.22, 0.8),
        (0.22, 0.8, 0.78, 0.8),
        (0.78, 0.8, 0.22, 0.2),
    ],
    "arrow": [(0.15, 0.5, 0.82, 0.5), (0.82, 0.5, 0.58, 0.28), (0.82, 0.5, 0.58, 0.72)],
    "steps": [
        (0.15, 0.8, 0.42, 0.8),
        (0.42, 0.8, 0.42, 0.5),
        (0.42, 0.5, 0.62, 0.5),
        (0.62, 0.5, 0.62, 0.2),
        (0.62, 0.2, 0.85, 0.2),
    ],
}
_CIRCLES = {"circle": [(0.5, 0.5, 0.33)]}

GLYPH_NAMES = tuple(sorted(_S))


@dataclass(frozen=True)
class RenderStyle:
    """Rendering knobs shared by every sample of a domain."""

    thickness: tuple = (1.6, 2.6)  # stroke width range, pixels
    background: str = "plain"  # plain | noise | inverted
    rotation_jitter: float = 30.0  # degrees, uniform +/-
    noise_sigma: float = 0.02  # per-pixel gaussian, applied last

    def __post_init__(self):
        if self.background not in ("plain", "noise", "inverted"):
            raise ValueError(f"unknown background type {self.background!r}")


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    class_glyphs: tuple
    style: RenderStyle
    seed: int
    train_count: int  # per class
    test_count: int  # per class

    def __post_init__(self):
        for g in self.class_glyphs:
            if g not in _S:
                raise ValueError(f"unknown glyph {g!r}")

    @property
    def class_count(self):
        return len(self.class_glyphs)


@dataclass
class ImageSample:
    pixels: np.ndarray  # float32 [H,W] in [0,1]
    label: int


@dataclass
class Dataset:
    class_count: int
    train: list
    test: list
    spec: Optional[DomainSpec] = None

    def arrays(self, split):
        """(X float64 [N,1,H,W], y int64 [N]) for 'train' or 'test'."""
        samples = self.train if split == "train" else self.test
        x = np.stack([s.pixels for s in samples]).astype(np.float64)[:, None, :, :]
        y = np.array([s.label for s in samples], dtype=np.int64)
        return x, y


def _rotate(points, theta):
    c, s = np.cos(theta), np.sin(theta)
    centered = points - 0.5
    return np.stack(
        [0.5 + c * centered[:, 0] - s * centered[:, 1], 0.5 + s * centered[:, 0] + c * centered[:, 1]],
        axis=1,
    )


def _distance_field(glyph_id, theta, size):
    """Per-pixel distance (pixel units) to the rotated glyph strokes."""
    ys, xs = np.mgrid[0:size, 0:size]
    px = (xs + 0.5) / size
    py = (ys + 0.5) / size
    dist = np.full((size, size), np.inf)
    segs = _S[glyph_id]
    if segs:
        pts = np.array(segs, dtype=np.float64).reshape(-1, 2)
        pts = _rotate(pts, theta).reshape(-1, 4)
        for x1, y1, x2, y2 in pts:
            dx, dy = x2 - x1, y2 - y1
            length_sq = dx * dx + dy * dy
            t = ((px - x1) * dx + (py - y1) * dy) / max(length_sq, 1e-12)
            t = np.clip(t, 0.0, 1.0)
            dist = np.minimum(dist, np.hypot(px - (x1 + t * dx), py - (y1 + t * dy)))
    for cx, cy, r in _CIRCLES.get(glyph_id, []):
        cxr, cyr = _rotate(np.array([[cx, cy]]), theta)[0]
        dist = np.minimum(dist, np.abs(np.hypot(px - cxr, py - cyr) - r))
    return dist * size


def render_glyph(glyph_id, style, rng, size=IMG_SIZE):
    """Render one sample; a pure function of (glyph, style, generator state)."""
    if glyph_id not in _S:
        raise ValueError(f"unknown glyph {glyph_id!r}")
    theta = np.deg2rad(rng.uniform(-style.rotation_jitter, style.rotation_jitter))
    half_width = rng.uniform(*style.thickness) / 2.0
    dist = _distance_field(glyph_id, theta, size)
    coverage = np.clip(0.5 + (half_width - dist) / _ANTIALIAS_PX, 0.0, 1.0)
    if style.background == "noise":
        bgfield = BG_LEVEL + rng.uniform(0.0, _BG_TEXTURE_AMPLITUDE, (size, size))
    else:
        bgfield = np.full((size, size), BG_LEVEL)
    base = bgfield + (STROKE_LEVEL - bgfield) * coverage
    base = np.clip(base, 0.0, 1.0).astype(np.float32)
    if style.background == "inverted":
        # float32 subtraction so an inverted render is bit-for-bit
        # 1 - the corresponding plain render
        base = np.float32(1.0) - base
    if style.noise_sigma > 0:
        noisy = base.astype(np.float64) + rng.normal(0.0, style.noise_sigma, (size, size))
        base = np.clip(noisy, 0.0, 1.0).astype(np.float32)
    return base


_SPLIT_CODES = {"train": 0, "test": 1}


def generate_domain(spec: DomainSpec) -> Dataset:
    """Balanced, seeded dataset; a pure function of its spec."""
    if spec.train_count <= 0 or spec.test_count <= 0:
        raise ValueError("per-class counts must be positive")
    splits = {}
    for split, code in _SPLIT_CODES.items():
        count = spec.train_count if split == "train" else spec.test_count
        samples = []
        for label, glyph in enumerate(spec.class_glyphs):
            for index in range(count):
                rng = philox(spec.seed, code, label, index)
                samples.append(ImageSample(render_glyph(glyph, spec.style, rng), label))
        splits[split] = samples
    return Dataset(spec.class_count, splits["train"], splits["test"], spec=spec)


# ---------------------------------------------------------------------------
# TESD container: magic, u32 version, u32 class_count, u16 H, u16 W,
# u32 train_count, u32 test_count, then (u16 label + H*W f32) per sample,
# train split first. Everything little-endian.

_MAGIC = b"TESD"
_VERSION = 1
_HEADER = struct.Struct("<4sIIHHII")


class DatasetFormatError(ValueError):
    pass


def save_dataset(dataset: Dataset, path):
    first = dataset.train[0].pixels.shape
    blob = bytearray()
    blob += _HEADER.pack(
        _MAGIC, _VERSION, dataset.class_count, first[0], first[1], len(dataset.train), len(dataset.test)
    )
    for sample in dataset.train + dataset.test:
        blob += struct.pack("<H", sample.label)
        blob += np.ascontiguousarray(sample.pixels, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise DatasetFormatError(f"truncated header: expected {_HEADER.size} bytes, got {len(blob)}")
    magic, version, class_count, h, w, n_train, n_test = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r} at byte 0, expected {_MAGIC!r}")
    if version != _VERSION:
        raise DatasetFormatError(f"unsupported version {version} at byte 4")
    sample_bytes = 2 + 4 * h * w
    expected = _HEADER.size + (n_train + n_test) * sample_bytes
    if len(blob) != expected:
        raise DatasetFormatError(f"expected {expected} bytes, got {len(blob)}")
    offset = _HEADER.size
    samples = []
    for _ in range(n_train + n_test):
        (label,) = struct.unpack_from("<H", blob, offset)
        if label >= class_count:
            raise DatasetFormatError(f"label {label} out of range at byte {offset}")
        pixels = np.frombuffer(blob, dtype="<f4", count=h * w, offset=offset + 2).reshape(h, w)
        samples.append(ImageSample(pixels.copy(), int(label)))
        offset += sample_bytes
    return Dataset(class_count, samples[:n_train], samples[n_train:])


# ---------------------------------------------------------------------------
# benchmark domains

SOURCE_GLYPHS = ("plus", "cross", "square", "diamond", "triangle", "circle", "vee", "zigzag", "tee", "ell")
TARGET_GLYPHS = {
    "slate": ("square", "triangle", "plus", "star", "hourglass"),
    "ochre": ("circle", "cross", "ell", "arrow", "steps"),
}

SOURCE_STYLE = RenderStyle(thickness=(1.6, 2.6), background="plain", rotation_jitter=30.0, noise_sigma=0.02)
TARGET_STYLES = {
    "slate": RenderStyle(thickness=(1.5, 2.4), background="noise", rotation_jitter=35.0, noise_sigma=0.03),
    "ochre": RenderStyle(thickness=(2.0, 3.0), background="inverted", rotation_jitter=18.0, noise_sigma=0.02),
}


def source_domain_spec(seed, train_count=200, test_count=40):
    return DomainSpec("source", SOURCE_GLYPHS, SOURCE_STYLE, seed, train_count, test_count)


def target_domain_spec(name, seed, train_count=40, test_count=25):
    return DomainSpec(name, TARGET_GLYPHS[name], TARGET_STYLES[name], seed, train_count, test_count)
