"""Synthetic shape images, corruptions, warm-up augmentations and domain streams.

Images are ``(H, W, 1)`` float arrays in [0, 1]. Every generator is a pure
function of ``(seed, index)``.

Corruption parameters by severity (index 0 is the identity extension):

==============  ======================================  ==========================
kind            parameter                               severities 1..5
==============  ======================================  ==========================
gaussian-noise  noise std                               .06 .09 .12 .16 .20
impulse-noise   salt-and-pepper fraction                .01 .03 .05 .07 .09
blur            gaussian sigma (pixels)                 .40 .55 .70 .85 1.0
contrast        contrast factor (1 = unchanged)         .60 .50 .40 .30 .20
brightness      additive shift                          .05 .15 .25 .35 .45
==============  ======================================  ==========================
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError

SIZE = 16
SHAPES = ("disk", "cross", "bar", "ring", "x-cross", "v-bar", "square", "frame",
          "triangle-up", "triangle-down")

SEVERITY_TABLE = {
    "gaussian-noise": (0.0, 0.06, 0.09, 0.12, 0.16, 0.20),
    "impulse-noise": (0.0, 0.01, 0.03, 0.05, 0.07, 0.09),
    "blur": (0.0, 0.4, 0.55, 0.7, 0.85, 1.0),
    "contrast": (1.0, 0.6, 0.5, 0.4, 0.3, 0.2),
    "brightness": (0.0, 0.05, 0.15, 0.25, 0.35, 0.45),
}
CORRUPTIONS = tuple(SEVERITY_TABLE)
IDENTITY = "none"

AUGMENTATIONS = ("jitter", "pad-crop", "affine", "invert", "hflip")
DEFAULT_RECIPE = ("jitter", "invert")


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W, 1) float32
    labels: np.ndarray  # (n,) int64
    num_classes: int
    seed: int

    def __len__(self) -> int:
        return len(self.labels)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return (Dataset(self.images[:n_first], self.labels[:n_first], self.num_classes, self.seed),
                Dataset(self.images[n_first:], self.labels[n_first:], self.num_classes, self.seed))


def _shape_mask(kind: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    ax, ay = np.abs(x), np.abs(y)
    r = np.hypot(x, y)
    if kind == "disk":
        return r < 0.55
    if kind == "cross":
        return ((ax < 0.16) & (ay < 0.68)) | ((ay < 0.16) & (ax < 0.68))
    if kind == "bar":
        return (ax < 0.72) & (ay < 0.17)
    if kind == "ring":
        return (r > 0.36) & (r < 0.62)
    if kind == "x-cross":
        u, v = (x + y) / np.sqrt(2), (x - y) / np.sqrt(2)
        return _shape_mask("cross", u, v)
    if kind == "v-bar":
        return (ay < 0.72) & (ax < 0.17)
    if kind == "square":
        return (ax < 0.48) & (ay < 0.48)
    if kind == "frame":
        m = np.maximum(ax, ay)
        return (m > 0.3) & (m < 0.56)
    if kind == "triangle-up":
        return (y > -0.55) & (y < 0.5) & (ax < (y + 0.55) * 0.62)
    if kind == "triangle-down":
        return _shape_mask("triangle-up", x, -y)
    raise ConfigError(f"unknown shape {kind!r}")


def render_shape(kind: str, rng: np.random.Generator, size: int = SIZE, supersample: int = 4) -> np.ndarray:
    """Anti-aliased shape with random position, scale, rotation and intensities."""
    n = size * supersample
    t = (np.arange(n) + 0.5) / n * 2 - 1
    gx, gy = np.meshgrid(t, t)  # gy grows downward (image rows)
    cx, cy = rng.uniform(-0.15, 0.15, size=2)
    scale = rng.uniform(0.75, 1.0)
    theta = np.deg2rad(rng.uniform(-20, 20))
    c, s = np.cos(theta), np.sin(theta)
    px, py = gx - cx, -(gy - cy)  # shape frame: y up
    u = (c * px + s * py) / scale
    v = (-s * px + c * py) / scale
    cover = _shape_mask(kind, u, v).astype(np.float64)
    cover = cover.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    bg, fg = rng.uniform(0.0, 0.35), rng.uniform(0.65, 1.0)
    noise = rng.uniform(0.0, 0.06)
    img = bg + (fg - bg) * cover + rng.normal(0, noise, size=(size, size))
    return np.clip(img, 0, 1)[..., None].astype(np.float32)


def generate_source(n: int, num_classes: int, seed: int) -> Dataset:
    """Class-balanced labeled shapes; sample ``i`` depends only on (seed, i)."""
    if not 2 <= num_classes <= len(SHAPES):
        raise ConfigError(f"num_classes must be in [2, {len(SHAPES)}], got {num_classes}")
    if n < 50 * num_classes:
        raise ConfigError(f"need n >= 50 * C = {50 * num_classes}, got {n}")
    labels = np.random.default_rng([seed, 0xC1A55]).permutation(np.arange(n) % num_classes)
    images = np.stack([render_shape(SHAPES[labels[i]], np.random.default_rng([seed, i]))
                       for i in range(n)])
    return Dataset(images, labels.astype(np.int64), num_classes, seed)


def corrupt(image: np.ndarray, kind: str, severity: int, seed: int) -> np.ndarray:
    """Apply one corruption at ``severity`` (0 = identity); output clamped to [0, 1]."""
    if kind == IDENTITY:
        return image.copy()
    if kind not in SEVERITY_TABLE:
        raise ConfigError(f"unknown corruption {kind!r}; choose from {CORRUPTIONS}")
    if not 0 <= severity <= 5:
        raise ConfigError(f"severity must be in 0..5, got {severity}")
    p = SEVERITY_TABLE[kind][severity]
    x = image.astype(np.float64)
    rng = np.random.default_rng(seed)
    if kind == "gaussian-noise":
        out = x + p * rng.standard_normal(x.shape)
    elif kind == "impulse-noise":
        u = rng.random(x.shape)
        salt = rng.random(x.shape) < 0.5
        out = np.where(u < p, np.where(salt, 1.0, 0.0), x)
    elif kind == "blur":
        out = ndimage.gaussian_filter(x[..., 0], p, mode="nearest")[..., None] if p > 0 else x
    elif kind == "contrast":
        m = x.mean()
        out = (x - m) * p + m
    else:
        out = x + p
    return np.clip(out, 0, 1).astype(image.dtype)


def invert(image: np.ndarray) -> np.ndarray:
    return (1.0 - image).astype(image.dtype)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1].copy()


def augment(image: np.ndarray, recipe: Sequence[str], seed: int) -> np.ndarray:
    """Label-preserving augmentation for warm-up.

    ``jitter`` always applies a random contrast factor in [0.6, 1.4] and
    brightness shift in [-0.2, 0.2]; every other step fires with probability
    0.5 (pad-crop: 2-pixel reflect pad then random 16x16 crop; affine:
    rotation within 15 degrees and shift within 2 pixels).
    """
    rng = np.random.default_rng(seed)
    x = image.astype(np.float64)
    for step in recipe:
        if step not in AUGMENTATIONS:
            raise ConfigError(f"unknown augmentation {step!r}; choose from {AUGMENTATIONS}")
        if step == "jitter":
            a, b = rng.uniform(0.6, 1.4), rng.uniform(-0.2, 0.2)
            m = x.mean()
            x = np.clip((x - m) * a + m + b, 0, 1)
            continue
        if rng.random() >= 0.5:
            continue
        if step == "invert":
            x = 1.0 - x
        elif step == "hflip":
            x = x[:, ::-1]
        elif step == "pad-crop":
            h, w = x.shape[:2]
            xp = np.pad(x, ((2, 2), (2, 2), (0, 0)), mode="reflect")
            i, j = rng.integers(0, 5, size=2)
            x = xp[i:i + h, j:j + w]
        elif step == "affine":
            ang = np.deg2rad(rng.uniform(-15, 15))
            shift = rng.uniform(-2, 2, size=2)
            c, s = np.cos(ang), np.sin(ang)
            mat = np.array([[c, -s], [s, c]])
            centre = (np.array(x.shape[:2]) - 1) / 2
            offset = centre - mat @ (centre + shift)
            x = ndimage.affine_transform(x[..., 0], mat, offset=offset, order=1, mode="nearest")[..., None]
    return np.ascontiguousarray(np.clip(x, 0, 1)).astype(image.dtype)


def augment_batch(images: np.ndarray, recipe: Sequence[str], seed: int) -> np.ndarray:
    return np.stack([augment(im, recipe, int(s)) for im, s in
                     zip(images, np.random.default_rng(seed).integers(0, 2**31, len(images)))])


def to_nchw(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2))


@dataclass
class Batch:
    images: np.ndarray  # NHWC
    labels: np.ndarray
    domain: str
    severity: int
    segment: int


@dataclass
class DomainStream:
    """Ordered corruption segments over a held-out pool of source images."""

    segments: list[tuple[str, int]]
    samples_per_segment: int
    num_classes: int
    seed: int
    batch_size: int = 64
    _pool: Dataset | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.segments:
            raise ConfigError("stream has no segments")
        for kind, sev in self.segments:
            if kind != IDENTITY and kind not in SEVERITY_TABLE:
                raise ConfigError(f"unknown corruption {kind!r}")
            if not 0 <= sev <= 5:
                raise ConfigError(f"severity must be in 0..5, got {sev}")
        if self.batch_size < 1 or self.samples_per_segment < 1:
            raise ConfigError("batch size and samples per segment must be positive")

    @property
    def pool(self) -> Dataset:
        if self._pool is None:
            n = max(self.samples_per_segment, 50 * self.num_classes)
            self._pool = generate_source(n, self.num_classes, self.seed)
        return self._pool

    def segment_data(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        kind, sev = self.segments[index]
        pool = self.pool
        order = np.random.default_rng([self.seed, 7, index]).permutation(len(pool))[:self.samples_per_segment]
        imgs = np.stack([corrupt(pool.images[i], kind, sev, int(s)) for i, s in zip(
            order, np.random.default_rng([self.seed, 11, index]).integers(0, 2**31, len(order)))])
        return imgs, pool.labels[order]

    def __iter__(self) -> Iterator[Batch]:
        for si, (kind, sev) in enumerate(self.segments):
            imgs, labels = self.segment_data(si)
            for i in range(0, len(labels), self.batch_size):
                yield Batch(imgs[i:i + self.batch_size], labels[i:i + self.batch_size], kind, sev, si)

    def with_batch_size(self, batch_size: int) -> "DomainStream":
        return DomainStream(list(self.segments), self.samples_per_segment, self.num_classes,
                            self.seed, batch_size, self._pool)


def corruption_stream(severity: int = 5, kinds: Sequence[str] = CORRUPTIONS, **kw) -> DomainStream:
    return DomainStream([(k, severity) for k in kinds], **kw)


def export_dataset(ds: Dataset, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (f32 images then int32 labels, little-endian) and ``<path>.json``."""
    path = Path(path)
    images = ds.images.astype("<f4")
    labels = ds.labels.astype("<i4")
    header = {"format": "foctta-dataset", "version": 1, "shape": list(images.shape),
              "num_classes": ds.num_classes, "seed": ds.seed, "images_dtype": "<f4",
              "labels_dtype": "<i4", "images_offset": 0, "labels_offset": int(images.nbytes)}
    bin_path, json_path = path.with_suffix(".bin"), path.with_suffix(".json")
    bin_path.write_bytes(images.tobytes() + labels.tobytes())
    json_path.write_text(json.dumps(header, sort_keys=True, indent=2), encoding="utf-8")
    return bin_path, json_path


def import_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    raw = path.with_suffix(".bin").read_bytes()
    shape = tuple(header["shape"])
    n_img = int(np.prod(shape)) * 4
    images = np.frombuffer(raw[:n_img], dtype="<f4").reshape(shape).astype(np.float32)
    labels = np.frombuffer(raw[header["labels_offset"]:], dtype="<i4").astype(np.int64)
    return Dataset(images, labels, header["num_classes"], header["seed"])
